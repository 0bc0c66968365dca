//! Command-line front end for the extraction pipeline: run extractions
//! against a live provider or a replay stub, score predictions against gold,
//! stratify results by sensitivity level, and generate offline benchmarks.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use medgrade_core::backend::{
    Backend, BackendConfig, HttpTransport, Providers, RetryPolicy, StubTransport, Transport,
};
use medgrade_core::corpus::{
    self, ColumnMap, CorpusFile, NamePool, DEFAULT_PLACEHOLDER_PATTERNS,
};
use medgrade_core::metrics::{evaluate, MetricsReport, RecordTriples};
use medgrade_core::pipeline::{
    process_corpus, ChunkConfig, PipelineConfig, RecordOutcome, RecordRejections,
};
use medgrade_core::prompt::{
    build_prompt, bundled_exemplars, load_exemplars_path, output_schema, AblationFlags,
};
use medgrade_core::report::{emit_plot_data, stratify};
use medgrade_core::rules::RulePack;
use medgrade_core::synth::{generate, SynthConfig};
use medgrade_core::taxonomy::Taxonomy;

#[derive(Parser)]
#[command(name = "medgrade", version, about = "Privacy-triple extraction and grading for health consultations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run extraction over a corpus and write triple rows.
    Extract(ExtractArgs),
    /// Score predictions against gold annotations.
    Evaluate(EvaluateArgs),
    /// Stratify triple rows by category and sensitivity level.
    Report(ReportArgs),
    /// Print the JSON schema constraining model output.
    Schema(SchemaArgs),
    /// Generate a deterministic synthetic benchmark with gold and replay files.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Vocabulary TOML; defaults to the bundled one.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Override-rule TOML; defaults to the bundled pack.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Exemplar JSONL; defaults to the bundled exemplars.
    #[arg(long)]
    exemplars: Option<PathBuf>,
}

impl ConfigArgs {
    fn taxonomy(&self) -> Result<Taxonomy> {
        Ok(match &self.taxonomy {
            Some(path) => Taxonomy::load_path(path)
                .with_context(|| format!("loading taxonomy from {}", path.display()))?,
            None => Taxonomy::bundled(),
        })
    }

    fn rule_pack(&self, taxonomy: &Taxonomy) -> Result<RulePack> {
        Ok(match &self.rules {
            Some(path) => RulePack::load_path(path, taxonomy)
                .with_context(|| format!("loading rules from {}", path.display()))?,
            None => RulePack::bundled(taxonomy),
        })
    }
}

#[derive(Args)]
struct ExtractArgs {
    /// Input corpus: .xlsx, .csv, .tsv, or .jsonl with ID/Description columns.
    input: PathBuf,
    /// Output triple rows (.jsonl or .csv).
    #[arg(short, long)]
    output: PathBuf,
    /// Replay table for offline runs; mutually exclusive with --provider.
    #[arg(long, conflicts_with = "provider")]
    replay: Option<PathBuf>,
    /// Provider name from the provider config.
    #[arg(long)]
    provider: Option<String>,
    /// Model override for the chosen provider.
    #[arg(long)]
    model: Option<String>,
    /// Provider config TOML; defaults to the bundled list.
    #[arg(long)]
    providers: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Drop the few-shot exemplar turns from the prompt.
    #[arg(long)]
    no_few_shot: bool,
    /// Drop the structured-output schema from requests.
    #[arg(long)]
    no_schema: bool,
    /// Skip the deterministic override rules.
    #[arg(long)]
    no_rules: bool,
    /// Maximum characters per chunk.
    #[arg(long, default_value_t = 4000)]
    max_chars: usize,
    /// Characters of overlap between consecutive chunks.
    #[arg(long, default_value_t = 200)]
    overlap: usize,
    /// Concurrent records in flight.
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Attempts per request before giving up.
    #[arg(long, default_value_t = 4)]
    max_attempts: u32,
    /// Write per-record validator counters (JSONL) here.
    #[arg(long)]
    rejections: Option<PathBuf>,
    /// Write the full per-record audit trail (JSONL) here.
    #[arg(long)]
    audit_log: Option<PathBuf>,
    /// Replace de-identification placeholders with synthetic names.
    #[arg(long)]
    fill_names: bool,
    /// Seed for the synthetic name pool.
    #[arg(long, default_value_t = 7)]
    name_seed: u64,
    /// Regex for name placeholders; repeatable. Defaults to runs of * × ＊.
    #[arg(long = "name-pattern")]
    name_patterns: Vec<String>,
    /// Column holding the record id.
    #[arg(long, default_value = "ID")]
    id_column: String,
    /// Column holding the consultation text.
    #[arg(long, default_value = "Description")]
    description_column: String,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Gold triple rows (.jsonl or .csv).
    #[arg(long)]
    gold: PathBuf,
    /// Predicted triple rows (.jsonl or .csv).
    #[arg(long)]
    predictions: PathBuf,
    /// Validator counters written by `extract --rejections`.
    #[arg(long)]
    rejections: Option<PathBuf>,
    /// Write the full JSON report here (otherwise stdout only).
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Fail (exit 2) if the count-ratio metric falls below this floor.
    #[arg(long)]
    min_mcif: Option<f64>,
    /// Fail (exit 2) if category compliance falls below this floor.
    #[arg(long)]
    min_mccr: Option<f64>,
    /// Fail (exit 2) if sensitive-level grading falls below this floor.
    #[arg(long)]
    min_msgr: Option<f64>,
    /// Fail (exit 2) if max-level micro-F1 falls below this floor.
    #[arg(long)]
    min_f1: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Triple rows to stratify (.jsonl or .csv).
    input: PathBuf,
    /// Categories listed per level before the `other` bucket.
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Write plot-ready CSV here; otherwise it prints to stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SchemaArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Seed controlling the whole corpus.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of records to generate.
    #[arg(long, default_value_t = 1000)]
    records: usize,
    /// Minimum triples per record.
    #[arg(long, default_value_t = 2)]
    min_triples: usize,
    /// Maximum triples per record.
    #[arg(long, default_value_t = 6)]
    max_triples: usize,
    /// Where to write the consultation records (.jsonl or .csv).
    #[arg(long, default_value = "synth-corpus.jsonl")]
    corpus: PathBuf,
    /// Where to write the gold triple rows (.jsonl or .csv).
    #[arg(long, default_value = "synth-gold.jsonl")]
    gold: PathBuf,
    /// Where to write the replay table for `extract --replay`.
    #[arg(long, default_value = "synth-replay.jsonl")]
    replay: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        // A closed stdout (e.g. piping into `head`) is not a failure.
        Err(err) if is_broken_pipe(&err) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    };
    std::process::exit(code);
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        cause
            .downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Extract(args) => cmd_extract(args).map(|()| 0),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Report(args) => cmd_report(args).map(|()| 0),
        Command::Schema(args) => cmd_schema(args).map(|()| 0),
        Command::Synth(args) => cmd_synth(args).map(|()| 0),
    }
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let taxonomy = args.config.taxonomy()?;
    let rules = args.config.rule_pack(&taxonomy)?;
    let exemplars = match &args.config.exemplars {
        Some(path) => load_exemplars_path(path, &taxonomy)
            .with_context(|| format!("loading exemplars from {}", path.display()))?,
        None => bundled_exemplars(&taxonomy),
    };
    let flags = AblationFlags {
        few_shot: !args.no_few_shot,
        schema: !args.no_schema,
        rules: !args.no_rules,
    };
    let bundle = build_prompt(&taxonomy, &exemplars, flags);

    let corpus_file = CorpusFile::new(&args.input)?.with_columns(ColumnMap {
        record_id: args.id_column.clone(),
        description: args.description_column.clone(),
    });
    let mut records = corpus::read_corpus(&corpus_file)
        .with_context(|| format!("reading corpus from {}", args.input.display()))?;
    log::info!("read {} records from {}", records.len(), args.input.display());

    if args.fill_names {
        let pool = NamePool::generate(args.name_seed, 200);
        let patterns: Vec<String> = if args.name_patterns.is_empty() {
            DEFAULT_PLACEHOLDER_PATTERNS
                .iter()
                .map(|p| p.to_string())
                .collect()
        } else {
            args.name_patterns.clone()
        };
        let filled = corpus::fill_names(&mut records, &pool, &patterns)?;
        log::info!("filled {filled} name placeholders (seed {})", args.name_seed);
    }

    let transport: Box<dyn Transport> = match (&args.replay, &args.provider) {
        (Some(path), _) => Box::new(
            StubTransport::from_replay_path(path)
                .with_context(|| format!("loading replay table from {}", path.display()))?,
        ),
        (None, Some(provider)) => {
            let providers = match &args.providers {
                Some(path) => Providers::load_path(path)
                    .with_context(|| format!("loading providers from {}", path.display()))?,
                None => Providers::bundled(),
            };
            let config =
                BackendConfig::from_providers(&providers, provider, args.model.as_deref())?;
            Box::new(HttpTransport::new(&config)?)
        }
        (None, None) => bail!("choose a backend: --replay <file> or --provider <name>"),
    };
    let retry = RetryPolicy {
        max_attempts: args.max_attempts.max(1),
        ..RetryPolicy::default()
    };
    let backend = Backend::new(transport, retry, args.workers.max(1));

    let pipeline_config = PipelineConfig {
        chunk: ChunkConfig {
            max_chars: args.max_chars,
            overlap: args.overlap,
        },
        flags,
        workers: args.workers.max(1),
    };
    pipeline_config.chunk.validate()?;

    let results = process_corpus(
        &records,
        &backend,
        &bundle,
        &rules,
        &taxonomy,
        &pipeline_config,
    );

    let failed: Vec<&str> = results
        .iter()
        .filter(|r| matches!(r.outcome, RecordOutcome::Failed { .. }))
        .map(|r| r.record_id.as_str())
        .collect();
    let rows = corpus::result_rows(&results, &taxonomy);
    corpus::write_triple_rows(&rows, &args.output)
        .with_context(|| format!("writing rows to {}", args.output.display()))?;
    log::info!(
        "wrote {} triples across {} records to {}",
        rows.len(),
        results.len(),
        args.output.display()
    );

    if let Some(path) = &args.rejections {
        let logs: Vec<RecordRejections> = results
            .iter()
            .map(|r| RecordRejections {
                record_id: r.record_id.clone(),
                counts: r.rejections,
            })
            .collect();
        corpus::write_rejections(&logs, path)
            .with_context(|| format!("writing rejection log to {}", path.display()))?;
    }
    if let Some(path) = &args.audit_log {
        let mut out = std::fs::File::create(path)
            .with_context(|| format!("creating audit log {}", path.display()))?;
        use std::io::Write as _;
        for result in &results {
            writeln!(out, "{}", serde_json::to_string(result)?)?;
        }
    }
    if !failed.is_empty() {
        bail!(
            "{} of {} records failed: {}",
            failed.len(),
            results.len(),
            failed.join(", ")
        );
    }
    Ok(())
}

/// Row files cannot represent a record with zero triples, so any gold record
/// missing from the prediction rows is scored as an empty prediction set.
fn align_predictions(gold: &[RecordTriples], predictions: &mut Vec<RecordTriples>) {
    let present: std::collections::HashSet<&str> = predictions
        .iter()
        .map(|r| r.record_id.as_str())
        .collect();
    let missing: Vec<RecordTriples> = gold
        .iter()
        .filter(|g| !present.contains(g.record_id.as_str()))
        .map(|g| RecordTriples {
            record_id: g.record_id.clone(),
            triples: Vec::new(),
        })
        .collect();
    if !missing.is_empty() {
        log::warn!(
            "{} gold records had no prediction rows; scoring them as empty",
            missing.len()
        );
        predictions.extend(missing);
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<i32> {
    let taxonomy = args.config.taxonomy()?;
    let gold_rows = corpus::read_triple_rows(&args.gold)
        .with_context(|| format!("reading gold rows from {}", args.gold.display()))?;
    let gold = corpus::rows_to_record_triples(&gold_rows, &taxonomy)?;
    let prediction_rows = corpus::read_triple_rows(&args.predictions)
        .with_context(|| format!("reading predictions from {}", args.predictions.display()))?;
    let mut predictions = corpus::rows_to_record_triples(&prediction_rows, &taxonomy)?;
    align_predictions(&gold, &mut predictions);

    let rejections = match &args.rejections {
        Some(path) => Some(
            corpus::read_rejections(path)
                .with_context(|| format!("reading rejection log from {}", path.display()))?,
        ),
        None => None,
    };

    let report = evaluate(&gold, &predictions, rejections.as_deref())?;
    print_report(&report)?;
    if let Some(path) = &args.output {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing report to {}", path.display()))?;
    }

    let mut floors_broken = Vec::new();
    let mut check = |name: &str, value: f64, floor: Option<f64>| {
        if let Some(floor) = floor {
            if value < floor {
                floors_broken.push(format!("{name} {value:.4} < floor {floor:.4}"));
            }
        }
    };
    check("mcif", report.mcif, args.min_mcif);
    check("mccr", report.mccr, args.min_mccr);
    check("msgr", report.msgr, args.min_msgr);
    check("micro-f1", report.micro_f1, args.min_f1);
    if !floors_broken.is_empty() {
        for line in &floors_broken {
            eprintln!("floor violated: {line}");
        }
        return Ok(2);
    }
    Ok(0)
}

fn print_report(report: &MetricsReport) -> Result<()> {
    use std::io::Write as _;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "records            {}", report.records_total)?;
    writeln!(
        out,
        "mcif               {:.4}   (scored {}, skipped empty-gold {})",
        report.mcif, report.mcif_scored, report.mcif_skipped_empty_gold
    )?;
    writeln!(
        out,
        "mccr               {:.4}   (scored {}, skipped no-items {})",
        report.mccr, report.mccr_scored, report.mccr_skipped_no_items
    )?;
    writeln!(
        out,
        "msgr               {:.4}   ({} of {} sensitive pairs correct)",
        report.msgr, report.msgr_correct, report.msgr_pairs
    )?;
    writeln!(
        out,
        "max-level micro-f1 {:.4}   (P {:.4} / R {:.4}; tp {} fp {} fn {})",
        report.micro_f1,
        report.micro_precision,
        report.micro_recall,
        report.f1_true_positives,
        report.f1_false_positives,
        report.f1_false_negatives
    )?;
    if report.records_without_prediction > 0 {
        writeln!(
            out,
            "note: {} records had no predicted triples",
            report.records_without_prediction
        )?;
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let rows = corpus::read_triple_rows(&args.input)
        .with_context(|| format!("reading rows from {}", args.input.display()))?;
    let distributions = stratify(&rows, args.top_k);
    match &args.output {
        Some(path) => {
            emit_plot_data(&distributions, path)
                .with_context(|| format!("writing plot data to {}", path.display()))?;
            log::info!("wrote plot data to {}", path.display());
        }
        None => {
            use std::io::Write as _;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            writeln!(out, "level,category,count,share")?;
            for distribution in &distributions {
                for entry in &distribution.entries {
                    writeln!(
                        out,
                        "{},{},{},{:.6}",
                        distribution.level.get(),
                        entry.category,
                        entry.count,
                        entry.share
                    )?;
                }
            }
        }
    }
    Ok(())
}

fn cmd_schema(args: SchemaArgs) -> Result<()> {
    use std::io::Write as _;
    let taxonomy = args.config.taxonomy()?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(
        out,
        "{}",
        serde_json::to_string_pretty(&output_schema(&taxonomy))?
    )?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let taxonomy = args.config.taxonomy()?;
    let rules = args.config.rule_pack(&taxonomy)?;
    let config = SynthConfig {
        seed: args.seed,
        records: args.records,
        min_triples: args.min_triples,
        max_triples: args.max_triples,
    };
    let corpus_out = generate(&config, &taxonomy, &rules)?;

    corpus::write_corpus(&corpus_out.records, &args.corpus, &ColumnMap::default())
        .with_context(|| format!("writing corpus to {}", args.corpus.display()))?;
    let gold_rows = corpus::gold_rows(&corpus_out.gold, &taxonomy);
    corpus::write_triple_rows(&gold_rows, &args.gold)
        .with_context(|| format!("writing gold rows to {}", args.gold.display()))?;
    std::fs::write(&args.replay, corpus_out.replay_jsonl())
        .with_context(|| format!("writing replay table to {}", args.replay.display()))?;
    log::info!(
        "generated {} records ({} gold triples) -> {}, {}, {}",
        corpus_out.records.len(),
        gold_rows.len(),
        args.corpus.display(),
        args.gold.display(),
        args.replay.display()
    );
    Ok(())
}
