//! End-to-end extraction pipeline: chunk, prompt, complete, validate, apply
//! rules, merge.
//!
//! Records are independent and processed concurrently; chunks within a
//! record run sequentially. A backend failure on any chunk fails the whole
//! record (no partial extractions), while an unparseable response only
//! zeroes that chunk's contribution and the record flows on.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, ChatRequest};
use crate::prompt::{render_messages, AblationFlags, PromptBundle};
use crate::rules::{apply_rules, RuleDecision, RulePack};
use crate::taxonomy::Taxonomy;
use crate::validator::{parse_and_validate, RejectReason, Triple};

/// One input record: an identifier and the consultation text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsultationRecord {
    pub id: String,
    pub text: String,
}

/// Character-based chunking parameters. Budgets count characters, not bytes,
/// so CJK text is split the same way as ASCII.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkConfig {
    pub max_chars: usize,
    pub overlap: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            max_chars: 4000,
            overlap: 200,
        }
    }
}

impl ChunkConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.max_chars == 0 || self.overlap >= self.max_chars {
            return Err(PipelineError::BadChunkConfig {
                max_chars: self.max_chars,
                overlap: self.overlap,
            });
        }
        Ok(())
    }
}

/// Pipeline configuration: chunking, feature flags, and record concurrency.
#[derive(Debug, Clone, Copy)]
pub struct PipelineConfig {
    pub chunk: ChunkConfig,
    pub flags: AblationFlags,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            chunk: ChunkConfig::default(),
            flags: AblationFlags::default(),
            workers: 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid chunking config: max_chars {max_chars} must exceed overlap {overlap}")]
    BadChunkConfig { max_chars: usize, overlap: usize },
}

/// Whether a record made it through the backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RecordOutcome {
    Completed,
    Failed { error: String },
}

/// One extracted triple together with its rule audit trail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedTriple {
    #[serde(flatten)]
    pub triple: Triple,
    pub rule_decisions: Vec<RuleDecision>,
}

impl ExtractedTriple {
    /// The rule ids that fired for this triple, in application order.
    pub fn rules_fired(&self) -> Vec<&str> {
        self.rule_decisions
            .iter()
            .map(|d| d.rule_id.as_str())
            .collect()
    }
}

/// Validator rejection counters for one record, aggregated over its chunks.
/// `accepted_items` counts validator-accepted items before deduplication,
/// which is the denominator base the category-compliance metric needs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub accepted_items: usize,
    pub bad_category: usize,
    pub bad_level: usize,
    pub empty_entity: usize,
    pub malformed_item: usize,
    pub parse_failures: usize,
}

/// A rejection-log row: one record's counters keyed by record id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordRejections {
    pub record_id: String,
    #[serde(flatten)]
    pub counts: RejectionCounts,
}

/// The pipeline's output for one record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordResult {
    pub record_id: String,
    pub outcome: RecordOutcome,
    pub triples: Vec<ExtractedTriple>,
    pub chunk_count: usize,
    pub rejections: RejectionCounts,
}

/// Splits text into chunks of at most `max_chars` characters, preferring to
/// cut just after a sentence boundary (。！？ or newline) and overlapping
/// consecutive chunks by `overlap` characters.
pub fn chunk_text(text: &str, config: ChunkConfig) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() <= config.max_chars {
        return vec![text.to_string()];
    }

    let is_boundary = |c: char| matches!(c, '。' | '！' | '？' | '\n');
    let mut chunks = Vec::new();
    let mut start = 0usize;
    loop {
        let hard_end = (start + config.max_chars).min(chars.len());
        let end = if hard_end == chars.len() {
            hard_end
        } else {
            // Last boundary that still leaves the next start strictly after
            // this one; otherwise fall back to a hard split.
            (start + config.overlap + 1..hard_end)
                .rev()
                .find(|&i| is_boundary(chars[i - 1]))
                .unwrap_or(hard_end)
        };
        chunks.push(chars[start..end].iter().collect());
        if end == chars.len() {
            break;
        }
        start = end - config.overlap;
    }
    chunks
}

/// Rebuilds the original text from chunks by trimming each follow-up chunk's
/// leading overlap. Inverse of `chunk_text`; used to verify coverage.
pub fn reassemble_chunks(chunks: &[String], overlap: usize) -> String {
    let mut out = String::new();
    for (idx, chunk) in chunks.iter().enumerate() {
        if idx == 0 {
            out.push_str(chunk);
        } else {
            out.extend(chunk.chars().skip(overlap));
        }
    }
    out
}

fn dedup_key(triple: &Triple) -> (String, String, u8) {
    (
        triple.entity.clone(),
        triple.category.slug.clone(),
        triple.level.get(),
    )
}

/// Merges per-chunk triples: exact duplicates collapse to their first
/// occurrence, then the result is ordered by descending level and ascending
/// entity/category for deterministic output.
pub fn merge_triples(extracted: Vec<ExtractedTriple>) -> Vec<ExtractedTriple> {
    let mut seen = std::collections::HashSet::new();
    let mut merged: Vec<ExtractedTriple> = Vec::with_capacity(extracted.len());
    for item in extracted {
        if seen.insert(dedup_key(&item.triple)) {
            merged.push(item);
        }
    }
    merged.sort_by(|a, b| {
        b.triple
            .level
            .cmp(&a.triple.level)
            .then_with(|| a.triple.entity.cmp(&b.triple.entity))
            .then_with(|| a.triple.category.slug.cmp(&b.triple.category.slug))
    });
    merged
}

/// Runs one record through the pipeline.
pub fn process_record(
    record: &ConsultationRecord,
    backend: &Backend,
    bundle: &PromptBundle,
    pack: &RulePack,
    taxonomy: &Taxonomy,
    config: &PipelineConfig,
) -> RecordResult {
    let chunks = chunk_text(&record.text, config.chunk);
    let chunk_count = chunks.len();
    let mut rejections = RejectionCounts::default();
    let mut extracted = Vec::new();

    for chunk in &chunks {
        let request = ChatRequest {
            messages: render_messages(bundle, chunk),
            schema: bundle.schema.clone(),
            temperature: 0.0,
        };
        let completion = match backend.complete(&request) {
            Ok(result) => result,
            Err(err) => {
                // All or nothing: a backend failure poisons the record.
                return RecordResult {
                    record_id: record.id.clone(),
                    outcome: RecordOutcome::Failed {
                        error: err.to_string(),
                    },
                    triples: Vec::new(),
                    chunk_count,
                    rejections: RejectionCounts::default(),
                };
            }
        };

        let outcome = parse_and_validate(&completion.content, taxonomy);
        if outcome.parse_failed {
            rejections.parse_failures += 1;
            continue;
        }
        rejections.accepted_items += outcome.accepted.len();
        rejections.bad_category += outcome.rejected_by(RejectReason::BadCategory);
        rejections.bad_level += outcome.rejected_by(RejectReason::BadLevel);
        rejections.empty_entity += outcome.rejected_by(RejectReason::EmptyEntity);
        rejections.malformed_item += outcome.rejected_by(RejectReason::MalformedItem);

        for triple in outcome.accepted {
            let (final_triple, decisions) = if config.flags.rules {
                apply_rules(pack, &triple, chunk, taxonomy)
            } else {
                (triple, Vec::new())
            };
            extracted.push(ExtractedTriple {
                triple: final_triple,
                rule_decisions: decisions,
            });
        }
    }

    RecordResult {
        record_id: record.id.clone(),
        outcome: RecordOutcome::Completed,
        triples: merge_triples(extracted),
        chunk_count,
        rejections,
    }
}

/// Runs a corpus through the pipeline with up to `config.workers` records in
/// flight. Results are returned in input order regardless of scheduling.
pub fn process_corpus(
    records: &[ConsultationRecord],
    backend: &Backend,
    bundle: &PromptBundle,
    pack: &RulePack,
    taxonomy: &Taxonomy,
    config: &PipelineConfig,
) -> Vec<RecordResult> {
    let workers = config.workers.max(1).min(records.len().max(1));
    let next_index = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<RecordResult>>> = Mutex::new(vec![None; records.len()]);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next_index.fetch_add(1, Ordering::SeqCst);
                if idx >= records.len() {
                    break;
                }
                let result =
                    process_record(&records[idx], backend, bundle, pack, taxonomy, config);
                results.lock().expect("results poisoned")[idx] = Some(result);
            });
        }
    });

    results
        .into_inner()
        .expect("results poisoned")
        .into_iter()
        .map(|slot| slot.expect("every record processed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FaultPlan, RetryPolicy, StubTransport};
    use crate::prompt::{build_prompt, bundled_exemplars};
    use proptest::prelude::*;

    fn small_chunk_config() -> ChunkConfig {
        ChunkConfig {
            max_chars: 30,
            overlap: 6,
        }
    }

    #[test]
    fn short_text_is_a_single_chunk() {
        let chunks = chunk_text("患者头疼。", ChunkConfig::default());
        assert_eq!(chunks, vec!["患者头疼。".to_string()]);
    }

    #[test]
    fn chunks_prefer_sentence_boundaries() {
        let text = "第一句话说了一些事情。第二句话说了另一些事情。第三句话说了更多的事情。第四句继续。";
        let config = small_chunk_config();
        let chunks = chunk_text(text, config);
        assert!(chunks.len() > 1);
        for chunk in &chunks[..chunks.len() - 1] {
            assert!(
                chunk.ends_with('。'),
                "chunk should end at a sentence boundary: {chunk:?}"
            );
        }
        assert_eq!(reassemble_chunks(&chunks, config.overlap), text);
    }

    #[test]
    fn unbroken_text_hard_splits_at_budget() {
        let text: String = std::iter::repeat('字').take(100).collect();
        let config = small_chunk_config();
        let chunks = chunk_text(&text, config);
        assert!(chunks.len() > 1);
        for chunk in &chunks {
            assert!(chunk.chars().count() <= config.max_chars);
        }
        assert_eq!(chunks[0].chars().count(), config.max_chars);
        assert_eq!(reassemble_chunks(&chunks, config.overlap), text);
    }

    #[test]
    fn boundary_inside_overlap_is_ignored() {
        // The only boundary sits within the first `overlap` characters, so
        // using it would move the window backwards; a hard split must win.
        let text = format!("一二三。{}", "四".repeat(60));
        let config = small_chunk_config();
        let chunks = chunk_text(&text, config);
        assert_eq!(chunks[0].chars().count(), config.max_chars);
        assert_eq!(reassemble_chunks(&chunks, config.overlap), text);
    }

    proptest! {
        #[test]
        fn chunking_always_covers_the_input(
            text in proptest::collection::vec(
                prop_oneof![
                    Just('字'), Just('。'), Just('！'), Just('\n'), Just('a'), Just('，')
                ],
                0..400
            ),
            max_chars in 8usize..60,
            overlap in 0usize..7,
        ) {
            let text: String = text.into_iter().collect();
            let config = ChunkConfig { max_chars, overlap };
            config.validate().unwrap();
            let chunks = chunk_text(&text, config);
            prop_assert!(!chunks.is_empty());
            for chunk in &chunks {
                prop_assert!(chunk.chars().count() <= max_chars);
            }
            prop_assert_eq!(reassemble_chunks(&chunks, overlap), text);
            // Every chunk except the last must be longer than the overlap,
            // otherwise the window would not advance.
            for chunk in &chunks[..chunks.len() - 1] {
                prop_assert!(chunk.chars().count() > overlap);
            }
        }
    }

    // --- record processing -----------------------------------------------

    struct Fixture {
        taxonomy: Taxonomy,
        pack: RulePack,
        bundle: PromptBundle,
        config: PipelineConfig,
    }

    fn fixture() -> Fixture {
        let taxonomy = Taxonomy::bundled();
        let pack = RulePack::bundled(&taxonomy);
        let exemplars = bundled_exemplars(&taxonomy);
        let bundle = build_prompt(&taxonomy, &exemplars, AblationFlags::default());
        Fixture {
            taxonomy,
            pack,
            bundle,
            config: PipelineConfig::default(),
        }
    }

    fn backend_with(stub: StubTransport) -> Backend {
        Backend::new(
            Box::new(stub),
            RetryPolicy {
                max_attempts: 3,
                base_delay_ms: 1,
                max_delay_ms: 2,
            },
            4,
        )
    }

    fn record(id: &str, text: &str) -> ConsultationRecord {
        ConsultationRecord {
            id: id.to_string(),
            text: text.to_string(),
        }
    }

    #[test]
    fn happy_path_extracts_validates_and_applies_rules() {
        let fx = fixture();
        let text = "患者王五，体检查出HPV16阳性。";
        let mut stub = StubTransport::new();
        stub.insert_response(
            text,
            r#"{"triples": [
                {"entity": "王五", "category": "patient-name", "level": 4},
                {"entity": "HPV16阳性", "category": "test-exam-result", "level": 3},
                {"entity": "无效", "category": "not-real", "level": 2}
            ]}"#,
        );
        let backend = backend_with(stub);
        let result = process_record(
            &record("r1", text),
            &backend,
            &fx.bundle,
            &fx.pack,
            &fx.taxonomy,
            &fx.config,
        );

        assert_eq!(result.outcome, RecordOutcome::Completed);
        assert_eq!(result.chunk_count, 1);
        assert_eq!(result.rejections.accepted_items, 2);
        assert_eq!(result.rejections.bad_category, 1);
        assert_eq!(result.triples.len(), 2);
        // Sorted by descending level: the rule-promoted HPV triple first.
        assert_eq!(result.triples[0].triple.category.slug, "sensitive-test-result");
        assert_eq!(result.triples[0].triple.level.get(), 5);
        assert_eq!(result.triples[0].rules_fired(), vec!["hpv-16-positive"]);
        assert_eq!(result.triples[1].triple.entity, "王五");
        assert!(result.triples[1].rule_decisions.is_empty());
    }

    #[test]
    fn rules_ablation_skips_overrides() {
        let fx = fixture();
        let text = "体检查出HPV16阳性。";
        let mut stub = StubTransport::new();
        stub.insert_response(
            text,
            r#"{"triples": [{"entity": "HPV16阳性", "category": "test-exam-result", "level": 3}]}"#,
        );
        let backend = backend_with(stub);
        let mut config = fx.config;
        config.flags.rules = false;
        let result = process_record(
            &record("r1", text),
            &backend,
            &fx.bundle,
            &fx.pack,
            &fx.taxonomy,
            &config,
        );
        assert_eq!(result.triples.len(), 1);
        assert_eq!(result.triples[0].triple.category.slug, "test-exam-result");
        assert_eq!(result.triples[0].triple.level.get(), 3);
        assert!(result.triples[0].rule_decisions.is_empty());
    }

    #[test]
    fn backend_failure_poisons_the_whole_record() {
        let fx = fixture();
        let text = "患者王五。";
        let mut stub = StubTransport::new();
        stub.insert_response(text, r#"{"triples": []}"#);
        stub.insert_fault(text, FaultPlan::PermanentError);
        let backend = backend_with(stub);
        let result = process_record(
            &record("r1", text),
            &backend,
            &fx.bundle,
            &fx.pack,
            &fx.taxonomy,
            &fx.config,
        );
        assert!(matches!(result.outcome, RecordOutcome::Failed { .. }));
        assert!(result.triples.is_empty());
    }

    #[test]
    fn unparseable_response_zeroes_the_chunk_but_record_flows_on() {
        let fx = fixture();
        let text = "患者王五。";
        let mut stub = StubTransport::new();
        stub.insert_fault(text, FaultPlan::MalformedJson);
        let backend = backend_with(stub);
        let result = process_record(
            &record("r1", text),
            &backend,
            &fx.bundle,
            &fx.pack,
            &fx.taxonomy,
            &fx.config,
        );
        assert_eq!(result.outcome, RecordOutcome::Completed);
        assert!(result.triples.is_empty());
        assert_eq!(result.rejections.parse_failures, 1);
    }

    #[test]
    fn duplicate_triples_across_chunks_collapse() {
        let fx = fixture();
        let mut config = fx.config;
        config.chunk = ChunkConfig {
            max_chars: 40,
            overlap: 8,
        };
        let sentence = "患者李四目前确诊高血压。";
        let filler = "平时血压控制得不太好，经常头晕。医生建议按时吃药并复查。";
        let text = format!("{sentence}{filler}{sentence}");
        let chunks = chunk_text(&text, config.chunk);
        assert!(chunks.len() > 1, "fixture needs multiple chunks");

        let mut stub = StubTransport::new();
        for chunk in &chunks {
            let triples = if chunk.contains("李四") {
                r#"{"triples": [
                    {"entity": "李四", "category": "patient-name", "level": 4},
                    {"entity": "高血压", "category": "disease", "level": 2}
                ]}"#
                    .to_string()
            } else {
                r#"{"triples": []}"#.to_string()
            };
            stub.insert_response(chunk, triples);
        }
        let backend = backend_with(stub);
        let result = process_record(
            &record("r1", &text),
            &backend,
            &fx.bundle,
            &fx.pack,
            &fx.taxonomy,
            &config,
        );
        assert_eq!(result.outcome, RecordOutcome::Completed);
        let names: Vec<&str> = result
            .triples
            .iter()
            .map(|t| t.triple.entity.as_str())
            .collect();
        assert_eq!(names, vec!["李四", "高血压"]);
    }

    #[test]
    fn merged_output_is_sorted_by_level_then_entity() {
        let fx = fixture();
        let text = "张三确诊梅毒，体温38度，家住上海市。";
        let mut stub = StubTransport::new();
        stub.insert_response(
            text,
            r#"{"triples": [
                {"entity": "上海市", "category": "address-province-city", "level": 2},
                {"entity": "张三", "category": "patient-name", "level": 4},
                {"entity": "梅毒", "category": "disease", "level": 2},
                {"entity": "38度", "category": "body-temperature", "level": 3}
            ]}"#,
        );
        let backend = backend_with(stub);
        let result = process_record(
            &record("r1", text),
            &backend,
            &fx.bundle,
            &fx.pack,
            &fx.taxonomy,
            &fx.config,
        );
        let levels: Vec<u8> = result
            .triples
            .iter()
            .map(|t| t.triple.level.get())
            .collect();
        assert_eq!(levels, vec![5, 4, 3, 2]);
        assert_eq!(result.triples[0].triple.category.slug, "special-disease");
    }

    #[test]
    fn corpus_results_keep_input_order_at_any_worker_count() {
        let fx = fixture();
        let records: Vec<ConsultationRecord> = (0..10)
            .map(|i| record(&format!("r{i}"), &format!("患者编号{i}，头疼。")))
            .collect();
        let make_backend = || {
            let mut stub = StubTransport::new();
            for rec in &records {
                stub.insert_response(
                    &rec.text,
                    r#"{"triples": [{"entity": "头疼", "category": "chief-complaint", "level": 2}]}"#,
                );
            }
            backend_with(stub)
        };

        let sequential = process_corpus(
            &records,
            &make_backend(),
            &fx.bundle,
            &fx.pack,
            &fx.taxonomy,
            &PipelineConfig {
                workers: 1,
                ..fx.config
            },
        );
        let parallel = process_corpus(
            &records,
            &make_backend(),
            &fx.bundle,
            &fx.pack,
            &fx.taxonomy,
            &PipelineConfig {
                workers: 4,
                ..fx.config
            },
        );
        assert_eq!(sequential, parallel);
        let ids: Vec<&str> = parallel.iter().map(|r| r.record_id.as_str()).collect();
        let expected: Vec<String> = (0..10).map(|i| format!("r{i}")).collect();
        assert_eq!(ids, expected.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn chunk_config_validation_rejects_degenerate_setups() {
        assert!(ChunkConfig {
            max_chars: 0,
            overlap: 0
        }
        .validate()
        .is_err());
        assert!(ChunkConfig {
            max_chars: 10,
            overlap: 10
        }
        .validate()
        .is_err());
        assert!(ChunkConfig {
            max_chars: 10,
            overlap: 9
        }
        .validate()
        .is_ok());
    }
}
