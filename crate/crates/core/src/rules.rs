//! Deterministic override rules for high-risk findings.
//!
//! Rules patch validated triples after the model has spoken: positive results
//! for high-risk HPV genotypes and confirmed special-disease mentions are
//! forced to level 5, while negated or uncertain disease mentions are
//! downgraded to level 2. Rule packs are TOML documents; the bundled pack
//! ships inside the binary.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::normalize::fold_width;
use crate::taxonomy::{Category, SensitivityLevel, Taxonomy};
use crate::validator::Triple;

/// Where a rule's pattern is matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleScope {
    /// Match against the entity text itself.
    EntityText,
    /// Match against the chunk text; the rule fires only when some match
    /// span contains the entity text, so unrelated mentions elsewhere in the
    /// chunk cannot trigger it.
    SurroundingContext,
}

/// What a rule does to a matching triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RuleAction {
    /// Replace both category and level.
    SetCategoryAndLevel { category: String, level: u8 },
    /// Raise the level to at least the given value.
    PromoteLevel { level: u8 },
    /// Lower the level to at most the given value, optionally recategorising
    /// (e.g. to the suspected/ruled-out disease leaves).
    DowngradeLevel {
        level: u8,
        #[serde(default)]
        category: Option<String>,
    },
}

/// One rule as written in a pack document.
#[derive(Debug, Clone, Deserialize)]
pub struct OverrideRule {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub scope: RuleScope,
    pub pattern: String,
    pub action: RuleAction,
    pub priority: i32,
    /// Optional category filter: when present, the rule only applies to
    /// triples whose current category slug is in this list.
    #[serde(default)]
    pub applies_to: Option<Vec<String>>,
}

/// The action of a compiled rule, with category references resolved.
#[derive(Debug, Clone)]
enum CompiledAction {
    Set {
        category: Category,
        level: SensitivityLevel,
    },
    Promote {
        level: SensitivityLevel,
    },
    Downgrade {
        level: SensitivityLevel,
        category: Option<Category>,
    },
}

impl CompiledAction {
    fn kind(&self) -> ActionKind {
        match self {
            CompiledAction::Set { .. } => ActionKind::Set,
            CompiledAction::Promote { .. } => ActionKind::Promote,
            CompiledAction::Downgrade { .. } => ActionKind::Downgrade,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ActionKind {
    Set,
    Promote,
    Downgrade,
}

/// A rule ready for matching: pattern compiled, categories resolved.
#[derive(Debug, Clone)]
pub struct CompiledRule {
    pub id: String,
    pub description: String,
    pub scope: RuleScope,
    pub priority: i32,
    regex: Regex,
    action: CompiledAction,
    applies_to: Option<HashSet<String>>,
}

/// A loaded rule pack, sorted by descending priority.
#[derive(Debug, Clone, Default)]
pub struct RulePack {
    pub version: String,
    rules: Vec<CompiledRule>,
}

/// Record of one rule changing one triple, kept for audit output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleDecision {
    pub rule_id: String,
    pub before_category: String,
    pub before_level: u8,
    pub after_category: String,
    pub after_level: u8,
}

/// Errors raised while loading a rule pack.
#[derive(Debug, thiserror::Error)]
pub enum RuleError {
    #[error("malformed rule pack document: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("failed to read rule pack file: {0}")]
    Io(#[from] std::io::Error),
    #[error("rule `{rule_id}` has an invalid pattern: {source}")]
    BadRegex {
        rule_id: String,
        source: regex::Error,
    },
    #[error("rule `{rule_id}` references unknown category `{category}`")]
    UnknownCategory { rule_id: String, category: String },
    #[error("rule `{rule_id}` references undefined variable `{name}`")]
    UnknownVariable { rule_id: String, name: String },
    #[error("rule `{rule_id}` has an out-of-range level {level}")]
    LevelOutOfRange { rule_id: String, level: u8 },
    #[error("duplicate rule id `{0}`")]
    DuplicateRuleId(String),
}

#[derive(Deserialize)]
struct RawPack {
    #[serde(default)]
    version: String,
    #[serde(default)]
    vars: HashMap<String, String>,
    #[serde(default)]
    rules: Vec<OverrideRule>,
}

const BUNDLED_RULES: &str = include_str!("../assets/rules.toml");

/// Substitutes `{name}` placeholders from the vars table. Regex brace
/// constructs such as `{0,3}` are left untouched because placeholder names
/// must start with a letter.
fn substitute_vars(
    rule_id: &str,
    pattern: &str,
    vars: &HashMap<String, String>,
) -> Result<String, RuleError> {
    let placeholder = Regex::new(r"\{([a-z_][a-z0-9_]*)\}").expect("static regex");
    let mut out = String::with_capacity(pattern.len());
    let mut last = 0;
    for caps in placeholder.captures_iter(pattern) {
        let whole = caps.get(0).expect("match");
        let name = &caps[1];
        out.push_str(&pattern[last..whole.start()]);
        match vars.get(name) {
            Some(value) => out.push_str(value),
            None => {
                return Err(RuleError::UnknownVariable {
                    rule_id: rule_id.to_string(),
                    name: name.to_string(),
                })
            }
        }
        last = whole.end();
    }
    out.push_str(&pattern[last..]);
    Ok(out)
}

fn resolve_category(
    rule_id: &str,
    raw: &str,
    taxonomy: &Taxonomy,
) -> Result<Category, RuleError> {
    taxonomy
        .resolve(raw)
        .map(|entry| entry.category.clone())
        .ok_or_else(|| RuleError::UnknownCategory {
            rule_id: rule_id.to_string(),
            category: raw.to_string(),
        })
}

fn resolve_level(rule_id: &str, level: u8) -> Result<SensitivityLevel, RuleError> {
    SensitivityLevel::new(level).map_err(|_| RuleError::LevelOutOfRange {
        rule_id: rule_id.to_string(),
        level,
    })
}

impl RulePack {
    /// Parses and compiles a rule pack, validating every pattern and
    /// category reference against the vocabulary.
    pub fn load_from_str(source: &str, taxonomy: &Taxonomy) -> Result<Self, RuleError> {
        let raw: RawPack = toml::from_str(source)?;
        let mut seen_ids = HashSet::new();
        let mut rules = Vec::with_capacity(raw.rules.len());
        for rule in raw.rules {
            if !seen_ids.insert(rule.id.clone()) {
                return Err(RuleError::DuplicateRuleId(rule.id));
            }
            let pattern = substitute_vars(&rule.id, &rule.pattern, &raw.vars)?;
            let regex = Regex::new(&pattern).map_err(|source| RuleError::BadRegex {
                rule_id: rule.id.clone(),
                source,
            })?;
            let action = match rule.action {
                RuleAction::SetCategoryAndLevel { category, level } => CompiledAction::Set {
                    category: resolve_category(&rule.id, &category, taxonomy)?,
                    level: resolve_level(&rule.id, level)?,
                },
                RuleAction::PromoteLevel { level } => CompiledAction::Promote {
                    level: resolve_level(&rule.id, level)?,
                },
                RuleAction::DowngradeLevel { level, category } => CompiledAction::Downgrade {
                    level: resolve_level(&rule.id, level)?,
                    category: category
                        .map(|c| resolve_category(&rule.id, &c, taxonomy))
                        .transpose()?,
                },
            };
            let applies_to = rule
                .applies_to
                .map(|slugs| -> Result<HashSet<String>, RuleError> {
                    slugs
                        .into_iter()
                        .map(|s| {
                            resolve_category(&rule.id, &s, taxonomy).map(|c| c.slug)
                        })
                        .collect()
                })
                .transpose()?;
            rules.push(CompiledRule {
                id: rule.id,
                description: rule.description,
                scope: rule.scope,
                priority: rule.priority,
                regex,
                action,
                applies_to,
            });
        }
        // Stable sort keeps document order among equal priorities.
        rules.sort_by_key(|r| std::cmp::Reverse(r.priority));
        Ok(RulePack {
            version: raw.version,
            rules,
        })
    }

    /// Loads a rule pack from a TOML file on disk.
    pub fn load_path(path: &Path, taxonomy: &Taxonomy) -> Result<Self, RuleError> {
        let source = std::fs::read_to_string(path)?;
        Self::load_from_str(&source, taxonomy)
    }

    /// The rule pack compiled into the binary.
    pub fn bundled(taxonomy: &Taxonomy) -> Self {
        Self::load_from_str(BUNDLED_RULES, taxonomy).expect("bundled rules must compile")
    }

    /// A pack with no rules; applying it never changes a triple.
    pub fn empty() -> Self {
        RulePack::default()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> impl Iterator<Item = &CompiledRule> {
        self.rules.iter()
    }
}

/// Whether a rule matches a triple in the given chunk. Matching is performed
/// on width-folded text so full-width variants (ＨＰＶ１６＋) behave like
/// their ASCII forms.
fn rule_matches(rule: &CompiledRule, triple: &Triple, folded_entity: &str, folded_context: &str) -> bool {
    if let Some(filter) = &rule.applies_to {
        if !filter.contains(&triple.category.slug) {
            return false;
        }
    }
    match rule.scope {
        RuleScope::EntityText => rule.regex.is_match(folded_entity),
        RuleScope::SurroundingContext => {
            if folded_entity.is_empty() {
                return false;
            }
            rule.regex
                .find_iter(folded_context)
                .any(|m| m.as_str().contains(folded_entity))
        }
    }
}

/// Applies a rule pack to one triple. For each action kind the highest
/// priority matching rule is chosen; actions are applied in the order
/// set -> promote -> downgrade so downgrades take precedence. Every fired
/// rule is recorded with its before/after state, including no-op firings,
/// so the audit trail shows which rules matched. The result is a fixed
/// point: re-applying the pack yields the same triple and fires the same
/// rules.
pub fn apply_rules(
    pack: &RulePack,
    triple: &Triple,
    chunk_text: &str,
    taxonomy: &Taxonomy,
) -> (Triple, Vec<RuleDecision>) {
    let folded_entity = fold_width(triple.entity.trim());
    let folded_context = fold_width(chunk_text);

    let mut set_rule = None;
    let mut promote_rule = None;
    let mut downgrade_rule = None;
    for rule in &pack.rules {
        let slot = match rule.action.kind() {
            ActionKind::Set => &mut set_rule,
            ActionKind::Promote => &mut promote_rule,
            ActionKind::Downgrade => &mut downgrade_rule,
        };
        if slot.is_none() && rule_matches(rule, triple, &folded_entity, &folded_context) {
            *slot = Some(rule);
        }
        if set_rule.is_some() && promote_rule.is_some() && downgrade_rule.is_some() {
            break;
        }
    }

    let mut current = triple.clone();
    let mut decisions = Vec::new();
    for rule in [set_rule, promote_rule, downgrade_rule].into_iter().flatten() {
        let (new_category, new_level) = match &rule.action {
            CompiledAction::Set { category, level } => (Some(category.clone()), *level),
            CompiledAction::Promote { level } => (None, current.level.max(*level)),
            CompiledAction::Downgrade { level, category } => {
                (category.clone(), current.level.min(*level))
            }
        };
        let next_category = new_category.unwrap_or_else(|| current.category.clone());
        decisions.push(RuleDecision {
            rule_id: rule.id.clone(),
            before_category: current.category.slug.clone(),
            before_level: current.level.get(),
            after_category: next_category.slug.clone(),
            after_level: new_level.get(),
        });
        current.category = next_category;
        current.level = new_level;
    }
    // Category slugs in packs are validated at load time, so the final
    // category always resolves; the group is refreshed in case a set or
    // downgrade moved the triple across groups.
    if let Some(entry) = taxonomy.resolve(&current.category.slug) {
        current.category = entry.category.clone();
    }
    (current, decisions)
}

/// Applies a rule pack to every triple extracted from one chunk.
pub fn apply_rules_all(
    pack: &RulePack,
    triples: &[Triple],
    chunk_text: &str,
    taxonomy: &Taxonomy,
) -> Vec<(Triple, Vec<RuleDecision>)> {
    triples
        .iter()
        .map(|t| apply_rules(pack, t, chunk_text, taxonomy))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Taxonomy, RulePack) {
        let taxonomy = Taxonomy::bundled();
        let pack = RulePack::bundled(&taxonomy);
        (taxonomy, pack)
    }

    fn triple(tax: &Taxonomy, entity: &str, slug: &str, level: u8) -> Triple {
        Triple {
            entity: entity.to_string(),
            category: tax.resolve(slug).expect("slug").category.clone(),
            level: SensitivityLevel::new(level).unwrap(),
        }
    }

    #[test]
    fn bundled_pack_compiles_with_expected_size() {
        let (_, pack) = setup();
        assert_eq!(pack.len(), 26);
    }

    #[test]
    fn suspected_disease_is_downgraded_from_level_five() {
        let (tax, pack) = setup();
        let input = triple(&tax, "疑似肺结核", "special-disease", 5);
        let (out, decisions) =
            apply_rules(&pack, &input, "医生说疑似肺结核，需要进一步检查。", &tax);
        assert_eq!(out.category.slug, "disease-suspected");
        assert_eq!(out.level.get(), 2);
        assert!(decisions
            .iter()
            .any(|d| d.rule_id == "disease-suspected-entity"));
        let last = decisions.last().unwrap();
        assert_eq!(last.after_category, "disease-suspected");
        assert_eq!(last.after_level, 2);
    }

    #[test]
    fn context_cue_downgrades_without_entity_cue() {
        let (tax, pack) = setup();
        let input = triple(&tax, "肺结核", "disease", 2);
        let (out, decisions) = apply_rules(&pack, &input, "医生怀疑是肺结核。", &tax);
        assert_eq!(out.category.slug, "disease-suspected");
        assert_eq!(out.level.get(), 2);
        assert!(decisions
            .iter()
            .any(|d| d.rule_id == "disease-suspected-context"));
    }

    #[test]
    fn ruled_out_disease_is_recategorised() {
        let (tax, pack) = setup();
        let input = triple(&tax, "乙肝", "disease", 2);
        let (out, decisions) = apply_rules(&pack, &input, "化验后已经排除了乙肝。", &tax);
        assert_eq!(out.category.slug, "disease-ruled-out");
        assert_eq!(out.level.get(), 2);
        assert!(decisions
            .iter()
            .any(|d| d.rule_id == "disease-ruled-out-context"));
    }

    #[test]
    fn hpv_positive_forces_sensitive_test_result() {
        let (tax, pack) = setup();
        let input = triple(&tax, "HPV16阳性", "test-exam-result", 3);
        let (out, decisions) = apply_rules(&pack, &input, "体检报告显示HPV16阳性。", &tax);
        assert_eq!(out.category.slug, "sensitive-test-result");
        assert_eq!(out.level.get(), 5);
        assert_eq!(decisions.len(), 1);
        assert_eq!(decisions[0].rule_id, "hpv-16-positive");
    }

    #[test]
    fn hpv_rule_covers_entity_without_marker() {
        let (tax, pack) = setup();
        let input = triple(&tax, "HPV52", "test-exam-name", 2);
        let (out, _) = apply_rules(&pack, &input, "化验单上写着HPV52阳性。", &tax);
        assert_eq!(out.category.slug, "sensitive-test-result");
        assert_eq!(out.level.get(), 5);
    }

    #[test]
    fn hpv_rule_handles_full_width_text() {
        let (tax, pack) = setup();
        let input = triple(&tax, "ＨＰＶ１６＋", "test-exam-result", 3);
        let (out, _) = apply_rules(&pack, &input, "报告：ＨＰＶ１６＋。", &tax);
        assert_eq!(out.level.get(), 5);
    }

    #[test]
    fn hpv_genotype_list_fires_for_each_member() {
        let (tax, pack) = setup();
        let context = "检查发现HPV16、58阳性。";
        let first = triple(&tax, "HPV16", "test-exam-name", 2);
        let second = triple(&tax, "58阳性", "test-exam-result", 3);
        let (out1, _) = apply_rules(&pack, &first, context, &tax);
        assert_eq!(out1.level.get(), 5);
        let (out2, _) = apply_rules(&pack, &second, context, &tax);
        assert_eq!(out2.level.get(), 5);
    }

    #[test]
    fn hpv_negative_result_is_untouched() {
        let (tax, pack) = setup();
        let input = triple(&tax, "HPV16阴性", "test-exam-result", 3);
        let (out, decisions) = apply_rules(&pack, &input, "复查结果HPV16阴性。", &tax);
        assert_eq!(out, input);
        assert!(decisions.is_empty());
    }

    #[test]
    fn negative_genotype_next_to_positive_one_does_not_fire() {
        let (tax, pack) = setup();
        let context = "结果显示HPV16阴性，HPV18阳性。";
        let neg = triple(&tax, "HPV16阴性", "test-exam-result", 3);
        let (out_neg, decisions_neg) = apply_rules(&pack, &neg, context, &tax);
        assert_eq!(out_neg, neg);
        assert!(decisions_neg.is_empty());
        let pos = triple(&tax, "HPV18阳性", "test-exam-result", 3);
        let (out_pos, _) = apply_rules(&pack, &pos, context, &tax);
        assert_eq!(out_pos.level.get(), 5);
    }

    #[test]
    fn low_risk_genotype_does_not_fire() {
        let (tax, pack) = setup();
        let input = triple(&tax, "HPV6阳性", "test-exam-result", 3);
        let (out, decisions) = apply_rules(&pack, &input, "报告显示HPV6阳性。", &tax);
        assert_eq!(out, input);
        assert!(decisions.is_empty());
    }

    #[test]
    fn context_match_must_contain_the_entity() {
        let (tax, pack) = setup();
        let context = "邻居查出HPV16阳性，我自己只是有点高血压。";
        let bystander = triple(&tax, "高血压", "disease", 2);
        let (out, decisions) = apply_rules(&pack, &bystander, context, &tax);
        assert_eq!(out, bystander);
        assert!(decisions.is_empty());
    }

    #[test]
    fn special_disease_keyword_sets_level_five() {
        let (tax, pack) = setup();
        let cases = [
            ("梅毒", "special-disease-std"),
            ("肺结核", "special-disease-infectious"),
            ("抑郁症", "special-disease-psychiatric"),
            ("胃癌", "special-disease-malignant"),
            ("血友病", "special-disease-genetic"),
            ("痔疮", "special-disease-anorectal"),
            ("尿毒症", "special-disease-rare-incurable"),
        ];
        for (entity, rule_id) in cases {
            let input = triple(&tax, entity, "disease", 2);
            let (out, decisions) =
                apply_rules(&pack, &input, &format!("确诊{entity}两年了。"), &tax);
            assert_eq!(out.category.slug, "special-disease", "{entity}");
            assert_eq!(out.level.get(), 5, "{entity}");
            assert_eq!(decisions[0].rule_id, rule_id, "{entity}");
        }
    }

    #[test]
    fn category_filter_blocks_non_disease_triples() {
        let (tax, pack) = setup();
        let input = triple(&tax, "梅毒检测", "test-exam-name", 2);
        let (out, decisions) = apply_rules(&pack, &input, "做了一次梅毒检测。", &tax);
        assert_eq!(out, input);
        assert!(decisions.is_empty());
    }

    #[test]
    fn downgrade_wins_over_set() {
        let (tax, pack) = setup();
        let input = triple(&tax, "怀疑是艾滋病", "disease", 2);
        let (out, decisions) = apply_rules(&pack, &input, "他怀疑是艾滋病。", &tax);
        assert_eq!(out.category.slug, "disease-suspected");
        assert_eq!(out.level.get(), 2);
        // The set rule still fires first and is recorded before the downgrade.
        assert_eq!(decisions.len(), 2);
        assert_eq!(decisions[0].rule_id, "special-disease-std");
        assert_eq!(decisions[1].rule_id, "disease-suspected-entity");
    }

    #[test]
    fn unrelated_triples_pass_through_unchanged() {
        let (tax, pack) = setup();
        let input = triple(&tax, "王五", "patient-name", 4);
        let (out, decisions) = apply_rules(&pack, &input, "患者王五，头疼三天。", &tax);
        assert_eq!(out, input);
        assert!(decisions.is_empty());
    }

    #[test]
    fn applying_twice_reaches_a_fixed_point() {
        let (tax, pack) = setup();
        let contexts_and_triples = [
            ("医生说疑似肺结核。", triple(&tax, "疑似肺结核", "special-disease", 5)),
            ("体检报告显示HPV16阳性。", triple(&tax, "HPV16阳性", "test-exam-result", 3)),
            ("确诊梅毒两年。", triple(&tax, "梅毒", "disease", 2)),
            ("已经排除了乙肝。", triple(&tax, "乙肝", "disease", 2)),
            ("患者王五。", triple(&tax, "王五", "patient-name", 4)),
        ];
        for (context, input) in contexts_and_triples {
            let (once, first_decisions) = apply_rules(&pack, &input, context, &tax);
            let (twice, second_decisions) = apply_rules(&pack, &once, context, &tax);
            assert_eq!(once, twice, "entity {}", input.entity);
            let first_ids: Vec<&str> =
                first_decisions.iter().map(|d| d.rule_id.as_str()).collect();
            let second_ids: Vec<&str> =
                second_decisions.iter().map(|d| d.rule_id.as_str()).collect();
            assert_eq!(first_ids, second_ids, "entity {}", input.entity);
        }
    }

    #[test]
    fn promote_rule_raises_but_never_lowers() {
        let tax = Taxonomy::bundled();
        let doc = r#"
version = "test"

[[rules]]
id = "promote-hiv-exam"
description = "HIV test names are elevated"
scope = "entity_text"
pattern = 'HIV'
priority = 10

[rules.action]
type = "promote_level"
level = 4
"#;
        let pack = RulePack::load_from_str(doc, &tax).unwrap();
        let low = triple(&tax, "HIV检测", "test-exam-name", 2);
        let (out, decisions) = apply_rules(&pack, &low, "做了HIV检测。", &tax);
        assert_eq!(out.level.get(), 4);
        assert_eq!(decisions.len(), 1);

        let high = triple(&tax, "HIV检测报告", "sensitive-test-result", 5);
        let (out, decisions) = apply_rules(&pack, &high, "HIV检测报告出来了。", &tax);
        assert_eq!(out.level.get(), 5);
        // The rule fires but the audit entry records that nothing changed.
        assert_eq!(decisions.len(), 1);
        assert_eq!(decisions[0].before_level, 5);
        assert_eq!(decisions[0].after_level, 5);
    }

    #[test]
    fn higher_priority_rule_wins_within_action_kind() {
        let tax = Taxonomy::bundled();
        let doc = r#"
version = "test"

[[rules]]
id = "low"
scope = "entity_text"
pattern = '结核'
priority = 1

[rules.action]
type = "set_category_and_level"
category = "disease"
level = 2

[[rules]]
id = "high"
scope = "entity_text"
pattern = '结核'
priority = 2

[rules.action]
type = "set_category_and_level"
category = "special-disease"
level = 5
"#;
        let pack = RulePack::load_from_str(doc, &tax).unwrap();
        let input = triple(&tax, "肺结核", "chief-complaint", 2);
        let (out, decisions) = apply_rules(&pack, &input, "肺结核。", &tax);
        assert_eq!(out.category.slug, "special-disease");
        assert_eq!(decisions[0].rule_id, "high");
    }

    #[test]
    fn empty_pack_changes_nothing() {
        let tax = Taxonomy::bundled();
        let pack = RulePack::empty();
        let input = triple(&tax, "HPV16阳性", "test-exam-result", 3);
        let (out, decisions) = apply_rules(&pack, &input, "HPV16阳性。", &tax);
        assert_eq!(out, input);
        assert!(decisions.is_empty());
    }

    #[test]
    fn load_rejects_unknown_category() {
        let tax = Taxonomy::bundled();
        let doc = r#"
[[rules]]
id = "bad"
scope = "entity_text"
pattern = 'x'
priority = 1

[rules.action]
type = "set_category_and_level"
category = "not-a-category"
level = 5
"#;
        let err = RulePack::load_from_str(doc, &tax).unwrap_err();
        assert!(matches!(err, RuleError::UnknownCategory { .. }));
    }

    #[test]
    fn load_rejects_bad_regex_and_unknown_var() {
        let tax = Taxonomy::bundled();
        let bad_regex = r#"
[[rules]]
id = "bad-regex"
scope = "entity_text"
pattern = '(unclosed'
priority = 1

[rules.action]
type = "promote_level"
level = 3
"#;
        assert!(matches!(
            RulePack::load_from_str(bad_regex, &tax).unwrap_err(),
            RuleError::BadRegex { .. }
        ));

        let unknown_var = r#"
[[rules]]
id = "bad-var"
scope = "entity_text"
pattern = '{no_such_var}'
priority = 1

[rules.action]
type = "promote_level"
level = 3
"#;
        assert!(matches!(
            RulePack::load_from_str(unknown_var, &tax).unwrap_err(),
            RuleError::UnknownVariable { .. }
        ));
    }

    #[test]
    fn load_rejects_duplicate_ids_and_bad_levels() {
        let tax = Taxonomy::bundled();
        let dup = r#"
[[rules]]
id = "same"
scope = "entity_text"
pattern = 'x'
priority = 1

[rules.action]
type = "promote_level"
level = 3

[[rules]]
id = "same"
scope = "entity_text"
pattern = 'y'
priority = 2

[rules.action]
type = "promote_level"
level = 3
"#;
        assert!(matches!(
            RulePack::load_from_str(dup, &tax).unwrap_err(),
            RuleError::DuplicateRuleId(id) if id == "same"
        ));

        let bad_level = r#"
[[rules]]
id = "too-high"
scope = "entity_text"
pattern = 'x'
priority = 1

[rules.action]
type = "promote_level"
level = 6
"#;
        assert!(matches!(
            RulePack::load_from_str(bad_level, &tax).unwrap_err(),
            RuleError::LevelOutOfRange { level: 6, .. }
        ));
    }
}
