//! Prompt assembly: system instructions, few-shot exemplars, and the
//! structured-output schema.
//!
//! The chat layout is fixed: one system message carrying the instructions and
//! the category vocabulary, one user/assistant pair per exemplar, and a final
//! user message containing only the chunk text. Keeping the final user turn
//! free of boilerplate means identical chunks always produce identical final
//! messages, which the offline replay backend relies on.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::taxonomy::{SensitivityLevel, Taxonomy};
use crate::validator::Triple;

/// Chat message role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// One chat message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Message {
            role,
            content: content.into(),
        }
    }
}

/// A worked example shown to the model: input text plus the expected triples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub input: String,
    pub triples: Vec<ExemplarTriple>,
}

/// A triple as written in exemplar files: the category is a slug string and
/// the level a plain integer, exactly as the model is expected to answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarTriple {
    pub entity: String,
    pub category: String,
    pub level: u8,
}

/// Which optional prompt/pipeline features are enabled. Defaults to all on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    /// Include the few-shot exemplar turns.
    pub few_shot: bool,
    /// Attach the structured-output schema to requests.
    pub schema: bool,
    /// Apply the deterministic override rules after validation.
    pub rules: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            few_shot: true,
            schema: true,
            rules: true,
        }
    }
}

/// Everything needed to render the chat for one chunk.
#[derive(Debug, Clone)]
pub struct PromptBundle {
    pub system_text: String,
    pub exemplars: Vec<Exemplar>,
    pub schema: Option<Value>,
}

/// Errors raised while loading exemplar files.
#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("failed to read exemplar file: {0}")]
    Io(#[from] std::io::Error),
    #[error("exemplar line {line} is not valid JSON: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("exemplar line {line} uses unknown category `{category}`")]
    UnknownCategory { line: usize, category: String },
    #[error("exemplar line {line} has out-of-range level {level}")]
    LevelOutOfRange { line: usize, level: u8 },
}

const BUNDLED_EXEMPLARS: &str = include_str!("../assets/exemplars.jsonl");

/// Parses exemplars from JSONL text, validating every triple against the
/// vocabulary so the examples can never teach the model an unknown category.
pub fn load_exemplars(source: &str, taxonomy: &Taxonomy) -> Result<Vec<Exemplar>, PromptError> {
    let mut exemplars = Vec::new();
    for (idx, raw_line) in source.lines().enumerate() {
        let line = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let exemplar: Exemplar =
            serde_json::from_str(raw_line).map_err(|source| PromptError::Parse { line, source })?;
        for triple in &exemplar.triples {
            if !taxonomy.is_compatible(&triple.category) {
                return Err(PromptError::UnknownCategory {
                    line,
                    category: triple.category.clone(),
                });
            }
            if SensitivityLevel::new(triple.level).is_err() {
                return Err(PromptError::LevelOutOfRange {
                    line,
                    level: triple.level,
                });
            }
        }
        exemplars.push(exemplar);
    }
    Ok(exemplars)
}

/// Loads exemplars from a JSONL file on disk.
pub fn load_exemplars_path(
    path: &std::path::Path,
    taxonomy: &Taxonomy,
) -> Result<Vec<Exemplar>, PromptError> {
    let source = std::fs::read_to_string(path)?;
    load_exemplars(&source, taxonomy)
}

/// The exemplars compiled into the binary.
pub fn bundled_exemplars(taxonomy: &Taxonomy) -> Vec<Exemplar> {
    load_exemplars(BUNDLED_EXEMPLARS, taxonomy).expect("bundled exemplars must be valid")
}

/// The JSON schema constraining model output: an object with a `triples`
/// array whose `category` values are limited to the vocabulary slugs.
pub fn output_schema(taxonomy: &Taxonomy) -> Value {
    let slugs: Vec<&str> = taxonomy.slugs().collect();
    json!({
        "type": "object",
        "properties": {
            "triples": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "entity": { "type": "string" },
                        "category": { "type": "string", "enum": slugs },
                        "level": { "type": "integer", "minimum": 1, "maximum": 5 }
                    },
                    "required": ["entity", "category", "level"],
                    "additionalProperties": false
                }
            }
        },
        "required": ["triples"],
        "additionalProperties": false
    })
}

/// Renders the vocabulary digest embedded in the system message: one line
/// per leaf with slug, label, and default level, grouped by top-level group.
fn vocabulary_digest(taxonomy: &Taxonomy) -> String {
    let mut out = String::new();
    let mut current_group = None;
    for entry in taxonomy.entries() {
        if current_group != Some(entry.category.group) {
            current_group = Some(entry.category.group);
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{}]\n", entry.category.group.as_str()));
        }
        out.push_str(&format!(
            "- {}｜{}｜级别{}\n",
            entry.category.slug,
            entry.label,
            entry.default_level.get()
        ));
    }
    out
}

/// Builds the prompt bundle for a taxonomy, exemplar set, and feature flags.
pub fn build_prompt(
    taxonomy: &Taxonomy,
    exemplars: &[Exemplar],
    flags: AblationFlags,
) -> PromptBundle {
    let mut system_text = String::from(
        "你是一名医疗隐私信息分级助手。你的任务是从在线问诊对话文本中提取涉及个人隐私的实体，\
         并按照给定的分类词表为每个实体标注类别和1-5级敏感级别。\n\n\
         要求：\n\
         1. 实体必须是原文中出现的文字片段，保持原样，不要改写。\n\
         2. 类别必须从词表中选择，使用英文slug。\n\
         3. 级别以词表默认级别为基准：疑似或待确诊的疾病标为 disease-suspected、级别2；\
         已排除的疾病标为 disease-ruled-out、级别2；确诊的性病、传染病、精神疾病、恶性肿瘤、\
         遗传病、肛肠疾病、罕见病或绝症标为 special-disease、级别5；高危型HPV\
         （16/18/31/33/35/39/45/51/52/56/58/59/68/73/82型）阳性等敏感检查结果标为 \
         sensitive-test-result、级别5。\n\
         4. 只输出JSON，格式为 {\"triples\": [{\"entity\": \"...\", \"category\": \"...\", \
         \"level\": 1}]}，不要输出任何解释。若没有隐私实体，输出 {\"triples\": []}。\n",
    );
    if flags.schema {
        system_text.push_str("5. 输出必须严格符合随请求提供的JSON Schema。\n");
    }
    system_text.push_str("\n分类词表（slug｜名称｜默认级别）：\n");
    system_text.push_str(&vocabulary_digest(taxonomy));

    PromptBundle {
        system_text,
        exemplars: if flags.few_shot {
            exemplars.to_vec()
        } else {
            Vec::new()
        },
        schema: flags.schema.then(|| output_schema(taxonomy)),
    }
}

/// Serializes triples the way assistant turns and model output are expected
/// to look: a compact JSON object with a `triples` array.
pub fn triples_to_json(triples: &[ExemplarTriple]) -> String {
    serde_json::to_string(&json!({ "triples": triples })).expect("serializable")
}

/// Converts a validated triple back to the wire shape used in prompts.
pub fn triple_to_exemplar(triple: &Triple) -> ExemplarTriple {
    ExemplarTriple {
        entity: triple.entity.clone(),
        category: triple.category.slug.clone(),
        level: triple.level.get(),
    }
}

/// Renders the full chat for one chunk: system, exemplar pairs, then the
/// chunk text alone as the final user message.
pub fn render_messages(bundle: &PromptBundle, chunk_text: &str) -> Vec<Message> {
    let mut messages = Vec::with_capacity(bundle.exemplars.len() * 2 + 2);
    messages.push(Message::new(Role::System, bundle.system_text.clone()));
    for exemplar in &bundle.exemplars {
        messages.push(Message::new(Role::User, exemplar.input.clone()));
        messages.push(Message::new(
            Role::Assistant,
            triples_to_json(&exemplar.triples),
        ));
    }
    messages.push(Message::new(Role::User, chunk_text));
    messages
}
