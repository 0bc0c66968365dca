//! Parsing and validation of model output into graded triples.
//!
//! The envelope is parsed tolerantly — markdown fences are stripped, the
//! first balanced JSON value is extracted from surrounding prose, and a few
//! common wrapper shapes are unwrapped — but each item is validated strictly
//! against the category vocabulary and the 1-5 level range.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::taxonomy::{Category, SensitivityLevel, Taxonomy};

/// One extracted privacy item: the entity text exactly as the model wrote
/// it, its canonical category, and its sensitivity level. Only the category
/// string is normalized; the entity is never rewritten.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub entity: String,
    pub category: Category,
    pub level: SensitivityLevel,
}

/// Why an item was rejected during validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// The item is not an object or lacks a required string field.
    MalformedItem,
    /// The entity string is empty after trimming.
    EmptyEntity,
    /// The category does not name a leaf in the vocabulary.
    BadCategory,
    /// The level is not an integer in 1-5.
    BadLevel,
}

/// An item that failed validation, kept verbatim for the rejection log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedItem {
    pub raw: Value,
    pub reason: RejectReason,
}

/// Result of validating one model response.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub accepted: Vec<Triple>,
    pub rejected: Vec<RejectedItem>,
    /// True when no item list could be recovered from the response at all.
    pub parse_failed: bool,
}

impl ValidationOutcome {
    fn parse_failure() -> Self {
        ValidationOutcome {
            parse_failed: true,
            ..Default::default()
        }
    }

    /// Number of rejected items with the given reason.
    pub fn rejected_by(&self, reason: RejectReason) -> usize {
        self.rejected.iter().filter(|r| r.reason == reason).count()
    }
}

/// Parses a raw model response and validates every item against the
/// vocabulary. Never panics; unparseable responses yield
/// `parse_failed = true` with empty item lists.
pub fn parse_and_validate(raw_text: &str, taxonomy: &Taxonomy) -> ValidationOutcome {
    let Some(items) = extract_items(raw_text) else {
        return ValidationOutcome::parse_failure();
    };

    let mut outcome = ValidationOutcome::default();
    for item in items {
        match validate_item(&item, taxonomy) {
            Ok(triple) => outcome.accepted.push(triple),
            Err(reason) => outcome.rejected.push(RejectedItem { raw: item, reason }),
        }
    }
    outcome
}

/// Recovers the list of candidate items from a raw response, or `None` when
/// no JSON container can be found.
fn extract_items(raw_text: &str) -> Option<Vec<Value>> {
    let stripped = strip_code_fences(raw_text);
    let value = parse_json_value(&stripped)?;
    match value {
        Value::Array(items) => Some(items),
        Value::Object(map) => {
            if let Some(Value::Array(items)) = map.get("triples") {
                return Some(items.clone());
            }
            if map.len() == 1 {
                if let Some(Value::Array(items)) = map.values().next() {
                    return Some(items.clone());
                }
            }
            // Anything else object-shaped is treated as a single candidate
            // item so that a bare triple object still validates.
            Some(vec![Value::Object(map)])
        }
        _ => None,
    }
}

/// Removes a surrounding markdown code fence if present, keeping the body.
fn strip_code_fences(text: &str) -> String {
    let trimmed = text.trim();
    let Some(start) = trimmed.find("```") else {
        return trimmed.to_string();
    };
    let after_fence = &trimmed[start + 3..];
    // Skip an optional language tag on the fence line.
    let body_start = after_fence.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after_fence[body_start..];
    let body = match body.rfind("```") {
        Some(end) => &body[..end],
        None => body,
    };
    body.trim().to_string()
}

/// Parses the text as JSON, falling back to the first balanced JSON array or
/// object embedded in surrounding prose.
fn parse_json_value(text: &str) -> Option<Value> {
    if let Ok(value) = serde_json::from_str::<Value>(text) {
        return Some(value);
    }
    for (pos, c) in text.char_indices() {
        if c != '[' && c != '{' {
            continue;
        }
        if let Some(slice) = balanced_slice(&text[pos..]) {
            if let Ok(value) = serde_json::from_str::<Value>(slice) {
                return Some(value);
            }
        }
    }
    None
}

/// Returns the prefix of `text` covering one balanced bracket pair, honouring
/// JSON string literals and escapes.
fn balanced_slice(text: &str) -> Option<&str> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (idx, c) in text.char_indices() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '[' | '{' => depth += 1,
            ']' | '}' => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    return Some(&text[..idx + c.len_utf8()]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Validates one candidate item. The category is checked before the level so
/// that an item that is wrong on both axes counts as a category rejection.
fn validate_item(item: &Value, taxonomy: &Taxonomy) -> Result<Triple, RejectReason> {
    let map = item.as_object().ok_or(RejectReason::MalformedItem)?;

    let entity = map
        .get("entity")
        .and_then(Value::as_str)
        .ok_or(RejectReason::MalformedItem)?;
    if entity.trim().is_empty() {
        return Err(RejectReason::EmptyEntity);
    }

    let raw_category = map
        .get("category")
        .and_then(Value::as_str)
        .ok_or(RejectReason::MalformedItem)?;
    let entry = taxonomy
        .resolve(raw_category)
        .ok_or(RejectReason::BadCategory)?;

    let level_value = map.get("level").ok_or(RejectReason::MalformedItem)?;
    let level_int = level_value.as_i64().ok_or_else(|| {
        if level_value.is_number() {
            RejectReason::BadLevel
        } else {
            RejectReason::MalformedItem
        }
    })?;
    let level = SensitivityLevel::try_from(level_int).map_err(|_| RejectReason::BadLevel)?;

    Ok(Triple {
        entity: entity.to_string(),
        category: entry.category.clone(),
        level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::Group;

    fn tax() -> Taxonomy {
        Taxonomy::bundled()
    }

    #[test]
    fn accepts_plain_array() {
        let out = parse_and_validate(
            r#"[{"entity":"王五","category":"patient name","level":4}]"#,
            &tax(),
        );
        assert!(!out.parse_failed);
        assert_eq!(out.accepted.len(), 1);
        assert_eq!(out.accepted[0].entity, "王五");
        assert_eq!(out.accepted[0].category.slug, "patient-name");
        assert_eq!(out.accepted[0].category.group, Group::PersonalAttribute);
        assert_eq!(out.accepted[0].level.get(), 4);
    }

    #[test]
    fn accepts_triples_wrapper_object() {
        let out = parse_and_validate(
            r#"{"triples":[{"entity":"头疼三天","category":"chief-complaint","level":2}]}"#,
            &tax(),
        );
        assert_eq!(out.accepted.len(), 1);
        assert_eq!(out.accepted[0].category.slug, "chief-complaint");
    }

    #[test]
    fn accepts_single_key_wrapper_object() {
        let out = parse_and_validate(
            r#"{"results":[{"entity":"乙肝","category":"special disease","level":5}]}"#,
            &tax(),
        );
        assert_eq!(out.accepted.len(), 1);
        assert_eq!(out.accepted[0].level.get(), 5);
    }

    #[test]
    fn accepts_bare_single_item_object() {
        let out = parse_and_validate(
            r#"{"entity":"38.5度","category":"body temperature","level":3}"#,
            &tax(),
        );
        assert_eq!(out.accepted.len(), 1);
        assert!(out.rejected.is_empty());
    }

    #[test]
    fn strips_code_fences() {
        let raw = "```json\n[{\"entity\":\"李医生\",\"category\":\"doctor surname\",\"level\":3}]\n```";
        let out = parse_and_validate(raw, &tax());
        assert_eq!(out.accepted.len(), 1);
        assert_eq!(out.accepted[0].category.slug, "doctor-surname");
    }

    #[test]
    fn extracts_json_from_surrounding_prose() {
        let raw = "好的，以下是提取结果：[{\"entity\":\"高血压\",\"category\":\"disease\",\"level\":2}] 希望有帮助。";
        let out = parse_and_validate(raw, &tax());
        assert_eq!(out.accepted.len(), 1);
        assert_eq!(out.accepted[0].entity, "高血压");
    }

    #[test]
    fn rejects_unknown_category() {
        let out = parse_and_validate(
            r#"[{"entity":"王五","category":"favorite movie","level":4}]"#,
            &tax(),
        );
        assert!(out.accepted.is_empty());
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].reason, RejectReason::BadCategory);
    }

    #[test]
    fn bad_category_takes_precedence_over_bad_level() {
        let out = parse_and_validate(
            r#"[{"entity":"王五","category":"favorite movie","level":9}]"#,
            &tax(),
        );
        assert_eq!(out.rejected_by(RejectReason::BadCategory), 1);
        assert_eq!(out.rejected_by(RejectReason::BadLevel), 0);
    }

    #[test]
    fn rejects_out_of_range_levels() {
        for level in ["0", "6", "-1", "4.5"] {
            let raw =
                format!(r#"[{{"entity":"王五","category":"patient name","level":{level}}}]"#);
            let out = parse_and_validate(&raw, &tax());
            assert_eq!(out.rejected_by(RejectReason::BadLevel), 1, "level {level}");
        }
    }

    #[test]
    fn rejects_empty_entity_and_malformed_items() {
        let raw = r#"[
            {"entity":"  ","category":"patient name","level":4},
            {"category":"patient name","level":4},
            {"entity":"王五","category":"patient name","level":"four"},
            42,
            null
        ]"#;
        let out = parse_and_validate(raw, &tax());
        assert!(out.accepted.is_empty());
        assert_eq!(out.rejected_by(RejectReason::EmptyEntity), 1);
        assert_eq!(out.rejected_by(RejectReason::MalformedItem), 4);
    }

    #[test]
    fn mixed_valid_and_invalid_items_split_cleanly() {
        let raw = r#"[
            {"entity":"梅毒","category":"special disease","level":5},
            {"entity":"身高175cm","category":"height","level":3},
            {"entity":"爱看电影","category":"hobby level","level":4}
        ]"#;
        let out = parse_and_validate(raw, &tax());
        assert_eq!(out.accepted.len(), 2);
        assert_eq!(out.rejected_by(RejectReason::BadCategory), 1);
    }

    #[test]
    fn entity_text_is_preserved_verbatim() {
        let out = parse_and_validate(
            r#"[{"entity":"HPV16 阳性","category":"sensitive test result","level":5}]"#,
            &tax(),
        );
        assert_eq!(out.accepted[0].entity, "HPV16 阳性");
    }

    #[test]
    fn category_matching_is_normalization_aware() {
        for cat in ["Patient Name", "patient_name", "PATIENT-NAME", " patient  name "] {
            let raw = format!(r#"[{{"entity":"王五","category":"{cat}","level":4}}]"#);
            let out = parse_and_validate(&raw, &tax());
            assert_eq!(out.accepted.len(), 1, "category {cat:?}");
            assert_eq!(out.accepted[0].category.slug, "patient-name");
        }
    }

    #[test]
    fn unparseable_input_flags_parse_failure() {
        for raw in ["", "完全没有JSON", "{broken", "null", "42", "\"just a string\""] {
            let out = parse_and_validate(raw, &tax());
            assert!(out.parse_failed, "input {raw:?}");
            assert!(out.accepted.is_empty());
            assert!(out.rejected.is_empty());
        }
    }

    #[test]
    fn empty_array_is_a_valid_empty_result() {
        let out = parse_and_validate("[]", &tax());
        assert!(!out.parse_failed);
        assert!(out.accepted.is_empty());
        assert!(out.rejected.is_empty());
    }
}
