//! Corpus ingestion and result serialization.
//!
//! Consultation records arrive as spreadsheets (`.xlsx`), delimited files
//! (`.csv`/`.tsv`), or line-delimited JSON (`.jsonl`/`.ndjson`) with an `ID`
//! and a `Description` column (both remappable). Extraction results and gold
//! annotations share one row schema — `record_id, entity, category,
//! category_label, level, rules_fired` — written as JSONL or CSV, so the
//! evaluator needs a single reader. Line-delimited JSON is the canonical
//! interchange format; the other formats exist for spreadsheet parity.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use calamine::{open_workbook, Data, Reader, Xlsx};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::metrics::RecordTriples;
use crate::pipeline::{ConsultationRecord, RecordRejections, RecordResult};
use crate::taxonomy::{SensitivityLevel, Taxonomy};
use crate::validator::Triple;

/// Placeholder runs that mark de-identified patient names: half-width and
/// full-width asterisks and the multiplication sign. Operators should verify
/// this list against their own corpus and override it when needed.
pub const DEFAULT_PLACEHOLDER_PATTERNS: [&str; 3] = [r"\*{2,}", r"×{2,}", r"＊{2,}"];

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("delimited read/write failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("spreadsheet read failed: {0}")]
    Spreadsheet(#[from] calamine::XlsxError),
    #[error("spreadsheet has no worksheets")]
    NoWorksheet,
    #[error("line {line}: invalid JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: expected a JSON object")]
    NotAnObject { line: usize },
    #[error("missing column `{column}`; available columns: {available}")]
    MissingColumn { column: String, available: String },
    #[error("unsupported file extension `{extension}` (expected xlsx, csv, tsv, or jsonl)")]
    UnknownFormat { extension: String },
    #[error("writing `{extension}` files is not supported (use jsonl or csv)")]
    UnsupportedWrite { extension: String },
    #[error("row {row}: unknown category `{category}`")]
    UnknownCategory { row: usize, category: String },
    #[error("row {row}: level {level} is outside 1..=5")]
    BadLevel { row: usize, level: u8 },
    #[error("name pool is empty")]
    EmptyPool,
    #[error("bad placeholder pattern `{pattern}`: {source}")]
    BadPattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Supported on-disk corpus encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// `.xlsx` workbook; the first worksheet is read, first row as headers.
    Spreadsheet,
    /// `.csv` or `.tsv` with a header row.
    Delimited { delimiter: u8 },
    /// `.jsonl`/`.ndjson`: one JSON object per line.
    LineJson,
}

impl CorpusFormat {
    /// Picks a format from the file extension.
    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        let extension = path
            .extension()
            .map(|e| e.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        match extension.as_str() {
            "xlsx" => Ok(Self::Spreadsheet),
            "csv" => Ok(Self::Delimited { delimiter: b',' }),
            "tsv" => Ok(Self::Delimited { delimiter: b'\t' }),
            "jsonl" | "ndjson" => Ok(Self::LineJson),
            _ => Err(CorpusError::UnknownFormat { extension }),
        }
    }
}

/// Column (or JSON key) names for the record id and description fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub record_id: String,
    pub description: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            record_id: "ID".to_string(),
            description: "Description".to_string(),
        }
    }
}

/// A corpus input: path, encoding, and column names.
#[derive(Debug, Clone)]
pub struct CorpusFile {
    pub path: PathBuf,
    pub format: CorpusFormat,
    pub columns: ColumnMap,
}

impl CorpusFile {
    /// Builds a descriptor with the format inferred from the extension.
    pub fn new(path: impl Into<PathBuf>) -> Result<Self, CorpusError> {
        let path = path.into();
        let format = CorpusFormat::from_path(&path)?;
        Ok(Self {
            path,
            format,
            columns: ColumnMap::default(),
        })
    }

    pub fn with_columns(mut self, columns: ColumnMap) -> Self {
        self.columns = columns;
        self
    }
}

fn clean_description(raw: &str) -> String {
    if raw.trim().is_empty() {
        String::new()
    } else {
        raw.to_string()
    }
}

fn cell_to_string(cell: &Data) -> String {
    match cell {
        Data::Empty => String::new(),
        Data::String(s) => s.clone(),
        Data::Int(i) => i.to_string(),
        // Spreadsheets store integers as floats; render 42.0 as "42".
        Data::Float(f) if f.fract() == 0.0 && f.abs() < 1e15 => (*f as i64).to_string(),
        other => other.to_string(),
    }
}

/// Reads consultation records, one per row, preserving row order.
/// Whitespace-only descriptions come back empty; rows without a record id
/// get their zero-based row index as id.
pub fn read_corpus(file: &CorpusFile) -> Result<Vec<ConsultationRecord>, CorpusError> {
    match file.format {
        CorpusFormat::LineJson => read_corpus_jsonl(file),
        CorpusFormat::Delimited { delimiter } => read_corpus_delimited(file, delimiter),
        CorpusFormat::Spreadsheet => read_corpus_xlsx(file),
    }
}

fn finish_record(id: Option<String>, description: &str, row: usize) -> ConsultationRecord {
    let id = id
        .filter(|s| !s.trim().is_empty())
        .unwrap_or_else(|| row.to_string());
    ConsultationRecord {
        id,
        text: clean_description(description),
    }
}

fn read_corpus_jsonl(file: &CorpusFile) -> Result<Vec<ConsultationRecord>, CorpusError> {
    let handle = File::open(&file.path).map_err(io_err(&file.path))?;
    let mut records = Vec::new();
    let mut row = 0usize;
    for (index, line) in BufReader::new(handle).lines().enumerate() {
        let line = line.map_err(io_err(&file.path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|source| CorpusError::Json {
                line: index + 1,
                source,
            })?;
        let object = value
            .as_object()
            .ok_or(CorpusError::NotAnObject { line: index + 1 })?;
        let description = match object.get(&file.columns.description) {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
            None => {
                return Err(CorpusError::MissingColumn {
                    column: file.columns.description.clone(),
                    available: object.keys().cloned().collect::<Vec<_>>().join(", "),
                })
            }
        };
        let id = object.get(&file.columns.record_id).map(|v| match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        });
        records.push(finish_record(id, &description, row));
        row += 1;
    }
    Ok(records)
}

fn read_corpus_delimited(
    file: &CorpusFile,
    delimiter: u8,
) -> Result<Vec<ConsultationRecord>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .from_path(&file.path)?;
    let headers = reader.headers()?.clone();
    let description_index = headers
        .iter()
        .position(|h| h == file.columns.description)
        .ok_or_else(|| CorpusError::MissingColumn {
            column: file.columns.description.clone(),
            available: headers.iter().collect::<Vec<_>>().join(", "),
        })?;
    let id_index = headers.iter().position(|h| h == file.columns.record_id);

    let mut records = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let record = result?;
        let description = record.get(description_index).unwrap_or_default();
        let id = id_index.and_then(|i| record.get(i)).map(str::to_string);
        records.push(finish_record(id, description, row));
    }
    Ok(records)
}

fn read_corpus_xlsx(file: &CorpusFile) -> Result<Vec<ConsultationRecord>, CorpusError> {
    let mut workbook: Xlsx<BufReader<File>> = open_workbook(&file.path)?;
    let range = workbook
        .worksheet_range_at(0)
        .ok_or(CorpusError::NoWorksheet)??;
    let mut rows = range.rows();
    let headers: Vec<String> = rows
        .next()
        .map(|row| row.iter().map(cell_to_string).collect())
        .unwrap_or_default();
    let description_index = headers
        .iter()
        .position(|h| h == &file.columns.description)
        .ok_or_else(|| CorpusError::MissingColumn {
            column: file.columns.description.clone(),
            available: headers.join(", "),
        })?;
    let id_index = headers.iter().position(|h| h == &file.columns.record_id);

    let mut records = Vec::new();
    for (row, cells) in rows.enumerate() {
        let description = cells
            .get(description_index)
            .map(cell_to_string)
            .unwrap_or_default();
        let id = id_index
            .and_then(|i| cells.get(i))
            .map(cell_to_string);
        records.push(finish_record(id, &description, row));
    }
    Ok(records)
}

/// Writes consultation records as JSONL or CSV using the given column names.
pub fn write_corpus(
    records: &[ConsultationRecord],
    path: &Path,
    columns: &ColumnMap,
) -> Result<(), CorpusError> {
    match CorpusFormat::from_path(path)? {
        CorpusFormat::LineJson => {
            let mut out = File::create(path).map_err(io_err(path))?;
            for record in records {
                let mut object = serde_json::Map::new();
                object.insert(columns.record_id.clone(), record.id.clone().into());
                object.insert(columns.description.clone(), record.text.clone().into());
                let line = serde_json::Value::Object(object);
                writeln!(out, "{line}").map_err(io_err(path))?;
            }
            Ok(())
        }
        CorpusFormat::Delimited { delimiter } => {
            let mut writer = csv::WriterBuilder::new()
                .delimiter(delimiter)
                .from_path(path)?;
            writer.write_record([&columns.record_id, &columns.description])?;
            for record in records {
                writer.write_record([&record.id, &record.text])?;
            }
            writer.flush().map_err(io_err(path))?;
            Ok(())
        }
        CorpusFormat::Spreadsheet => Err(CorpusError::UnsupportedWrite {
            extension: "xlsx".to_string(),
        }),
    }
}

// --- synthetic names --------------------------------------------------------

const SURNAMES: [&str; 24] = [
    "王", "李", "张", "刘", "陈", "杨", "黄", "赵", "吴", "周", "徐", "孙", "马", "朱", "胡", "郭",
    "何", "林", "罗", "郑", "梁", "谢", "宋", "唐",
];
const GIVEN_CHARS: [&str; 28] = [
    "伟", "芳", "娜", "敏", "静", "丽", "强", "磊", "军", "洋", "勇", "艳", "杰", "娟", "涛", "明",
    "超", "秀", "兰", "霞", "平", "刚", "桂", "英", "华", "玉", "梅", "红",
];

/// A seeded pool of synthetic full names used to replace de-identification
/// placeholders. The same seed always yields the same pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamePool {
    seed: u64,
    names: Vec<String>,
}

impl NamePool {
    /// Generates `size` distinct synthetic names from `seed`.
    pub fn generate(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut names = Vec::with_capacity(size);
        let mut stamp = 0usize;
        let budget = size.saturating_mul(100) + 1000;
        for attempt in 0.. {
            if names.len() == size {
                break;
            }
            let surname = SURNAMES[rng.gen_range(0..SURNAMES.len())];
            let mut name = String::from(surname);
            name.push_str(GIVEN_CHARS[rng.gen_range(0..GIVEN_CHARS.len())]);
            if rng.gen_bool(0.6) {
                name.push_str(GIVEN_CHARS[rng.gen_range(0..GIVEN_CHARS.len())]);
            }
            // Past the collision budget, suffix a counter so generation
            // terminates even for pools larger than the combination space.
            if attempt > budget {
                stamp += 1;
                name.push_str(&stamp.to_string());
            }
            if seen.insert(name.clone()) {
                names.push(name);
            }
        }
        Self { seed, names }
    }

    /// Wraps an explicit name list under a seed.
    pub fn from_names(seed: u64, names: Vec<String>) -> Result<Self, CorpusError> {
        if names.is_empty() {
            return Err(CorpusError::EmptyPool);
        }
        Ok(Self { seed, names })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Replaces de-identification placeholders in each record with names drawn
/// deterministically from the pool, keyed by (pool seed, record index):
/// rerunning on the same input always produces the same output, and records
/// without placeholders stay byte-identical. Within one record, consecutive
/// placeholders receive distinct names (wrapping only when a record has more
/// placeholders than the pool has names). Returns the replacement count.
pub fn fill_names<S: AsRef<str>>(
    records: &mut [ConsultationRecord],
    pool: &NamePool,
    patterns: &[S],
) -> Result<usize, CorpusError> {
    if pool.names.is_empty() {
        return Err(CorpusError::EmptyPool);
    }
    if patterns.is_empty() {
        return Ok(0);
    }
    let mut alternation = Vec::with_capacity(patterns.len());
    for pattern in patterns {
        let pattern = pattern.as_ref();
        Regex::new(pattern).map_err(|source| CorpusError::BadPattern {
            pattern: pattern.to_string(),
            source,
        })?;
        alternation.push(format!("(?:{pattern})"));
    }
    let combined = Regex::new(&alternation.join("|")).expect("parts validated above");

    let mut replaced = 0usize;
    for (index, record) in records.iter_mut().enumerate() {
        let spans: Vec<(usize, usize)> = combined
            .find_iter(&record.text)
            .map(|m| (m.start(), m.end()))
            .collect();
        if spans.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(pool.seed);
        rng.set_stream(index as u64);
        let mut order: Vec<usize> = (0..pool.names.len()).collect();
        order.shuffle(&mut rng);

        let mut output = String::with_capacity(record.text.len());
        let mut cursor = 0usize;
        for (k, &(start, end)) in spans.iter().enumerate() {
            output.push_str(&record.text[cursor..start]);
            output.push_str(&pool.names[order[k % order.len()]]);
            cursor = end;
        }
        output.push_str(&record.text[cursor..]);
        record.text = output;
        replaced += spans.len();
    }
    Ok(replaced)
}

// --- triple rows -------------------------------------------------------------

/// One serialized triple: the shared row schema for predictions and gold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleRow {
    pub record_id: String,
    pub entity: String,
    /// Canonical category slug.
    pub category: String,
    #[serde(default)]
    pub category_label: String,
    pub level: u8,
    #[serde(default)]
    pub rules_fired: Vec<String>,
}

/// Flattens pipeline output into rows, resolving category labels.
pub fn result_rows(results: &[RecordResult], taxonomy: &Taxonomy) -> Vec<TripleRow> {
    let mut rows = Vec::new();
    for result in results {
        for extracted in &result.triples {
            let slug = &extracted.triple.category.slug;
            rows.push(TripleRow {
                record_id: result.record_id.clone(),
                entity: extracted.triple.entity.clone(),
                category: slug.clone(),
                category_label: taxonomy
                    .resolve(slug)
                    .map(|e| e.label.clone())
                    .unwrap_or_default(),
                level: extracted.triple.level.get(),
                rules_fired: extracted
                    .rules_fired()
                    .into_iter()
                    .map(str::to_string)
                    .collect(),
            });
        }
    }
    rows
}

/// Flattens gold annotations into the same row schema (no fired rules).
pub fn gold_rows(records: &[RecordTriples], taxonomy: &Taxonomy) -> Vec<TripleRow> {
    let mut rows = Vec::new();
    for record in records {
        for triple in &record.triples {
            rows.push(TripleRow {
                record_id: record.record_id.clone(),
                entity: triple.entity.clone(),
                category: triple.category.slug.clone(),
                category_label: taxonomy
                    .resolve(&triple.category.slug)
                    .map(|e| e.label.clone())
                    .unwrap_or_default(),
                level: triple.level.get(),
                rules_fired: Vec::new(),
            });
        }
    }
    rows
}

const ROW_HEADER: [&str; 6] = [
    "record_id",
    "entity",
    "category",
    "category_label",
    "level",
    "rules_fired",
];

/// Writes triple rows as JSONL or CSV (by extension), one row per triple.
/// CSV joins `rules_fired` with `;`.
pub fn write_triple_rows(rows: &[TripleRow], path: &Path) -> Result<(), CorpusError> {
    match CorpusFormat::from_path(path)? {
        CorpusFormat::LineJson => {
            let mut out = File::create(path).map_err(io_err(path))?;
            for row in rows {
                let line = serde_json::to_string(row).expect("row serializes");
                writeln!(out, "{line}").map_err(io_err(path))?;
            }
            Ok(())
        }
        CorpusFormat::Delimited { delimiter } => {
            let mut writer = csv::WriterBuilder::new()
                .delimiter(delimiter)
                .from_path(path)?;
            writer.write_record(ROW_HEADER)?;
            for row in rows {
                writer.write_record([
                    row.record_id.as_str(),
                    row.entity.as_str(),
                    row.category.as_str(),
                    row.category_label.as_str(),
                    &row.level.to_string(),
                    &row.rules_fired.join(";"),
                ])?;
            }
            writer.flush().map_err(io_err(path))?;
            Ok(())
        }
        CorpusFormat::Spreadsheet => Err(CorpusError::UnsupportedWrite {
            extension: "xlsx".to_string(),
        }),
    }
}

/// Reads triple rows back from JSONL or CSV.
pub fn read_triple_rows(path: &Path) -> Result<Vec<TripleRow>, CorpusError> {
    match CorpusFormat::from_path(path)? {
        CorpusFormat::LineJson => {
            let handle = File::open(path).map_err(io_err(path))?;
            let mut rows = Vec::new();
            for (index, line) in BufReader::new(handle).lines().enumerate() {
                let line = line.map_err(io_err(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                rows.push(
                    serde_json::from_str(&line).map_err(|source| CorpusError::Json {
                        line: index + 1,
                        source,
                    })?,
                );
            }
            Ok(rows)
        }
        CorpusFormat::Delimited { delimiter } => {
            let mut reader = csv::ReaderBuilder::new()
                .delimiter(delimiter)
                .from_path(path)?;
            let headers = reader.headers()?.clone();
            let col = |name: &str| -> Result<usize, CorpusError> {
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| CorpusError::MissingColumn {
                        column: name.to_string(),
                        available: headers.iter().collect::<Vec<_>>().join(", "),
                    })
            };
            let id_i = col("record_id")?;
            let entity_i = col("entity")?;
            let category_i = col("category")?;
            let label_i = headers.iter().position(|h| h == "category_label");
            let level_i = col("level")?;
            let rules_i = headers.iter().position(|h| h == "rules_fired");

            let mut rows = Vec::new();
            for result in reader.records() {
                let record = result?;
                let field = |i: usize| record.get(i).unwrap_or_default().to_string();
                let level: u8 = field(level_i).trim().parse().unwrap_or(0);
                let rules_fired = rules_i
                    .map(|i| {
                        field(i)
                            .split(';')
                            .filter(|s| !s.is_empty())
                            .map(str::to_string)
                            .collect()
                    })
                    .unwrap_or_default();
                rows.push(TripleRow {
                    record_id: field(id_i),
                    entity: field(entity_i),
                    category: field(category_i),
                    category_label: label_i.map(field).unwrap_or_default(),
                    level,
                    rules_fired,
                });
            }
            Ok(rows)
        }
        CorpusFormat::Spreadsheet => Err(CorpusError::UnsupportedWrite {
            extension: "xlsx".to_string(),
        }),
    }
}

/// Groups rows into per-record triple sets (first-seen record order),
/// validating categories and levels against the taxonomy.
pub fn rows_to_record_triples(
    rows: &[TripleRow],
    taxonomy: &Taxonomy,
) -> Result<Vec<RecordTriples>, CorpusError> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<Triple>> = HashMap::new();
    for (index, row) in rows.iter().enumerate() {
        let entry = taxonomy
            .resolve(&row.category)
            .ok_or_else(|| CorpusError::UnknownCategory {
                row: index + 1,
                category: row.category.clone(),
            })?;
        let level = SensitivityLevel::new(row.level).map_err(|_| CorpusError::BadLevel {
            row: index + 1,
            level: row.level,
        })?;
        let triple = Triple {
            entity: row.entity.clone(),
            category: entry.category.clone(),
            level,
        };
        if !grouped.contains_key(&row.record_id) {
            order.push(row.record_id.clone());
        }
        grouped.entry(row.record_id.clone()).or_default().push(triple);
    }
    Ok(order
        .into_iter()
        .map(|record_id| {
            let triples = grouped.remove(&record_id).unwrap_or_default();
            RecordTriples { record_id, triples }
        })
        .collect())
}

// --- rejection logs ----------------------------------------------------------

/// Writes per-record validator counters as JSONL.
pub fn write_rejections(rejections: &[RecordRejections], path: &Path) -> Result<(), CorpusError> {
    let mut out = File::create(path).map_err(io_err(path))?;
    for rejection in rejections {
        let line = serde_json::to_string(rejection).expect("rejection serializes");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

/// Reads a rejection log written by `write_rejections`.
pub fn read_rejections(path: &Path) -> Result<Vec<RecordRejections>, CorpusError> {
    let handle = File::open(path).map_err(io_err(path))?;
    let mut rejections = Vec::new();
    for (index, line) in BufReader::new(handle).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        rejections.push(
            serde_json::from_str(&line).map_err(|source| CorpusError::Json {
                line: index + 1,
                source,
            })?,
        );
    }
    Ok(rejections)
}
