//! Category vocabulary with sensitivity levels.
//!
//! The vocabulary is a closed set of ~100 leaf categories organised into six
//! top-level groups. Every leaf carries a default sensitivity level from 1
//! (public) to 5 (special disease data). The bundled vocabulary ships inside
//! the binary; callers may load an alternative TOML document with the same
//! shape.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::normalize::normalize_slug;

/// Sensitivity level on the 1-5 scale used for health data grading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct SensitivityLevel(u8);

impl SensitivityLevel {
    pub const MIN: SensitivityLevel = SensitivityLevel(1);
    pub const MAX: SensitivityLevel = SensitivityLevel(5);

    /// Builds a level, rejecting values outside 1-5.
    pub fn new(value: u8) -> Result<Self, TaxonomyError> {
        if (1..=5).contains(&value) {
            Ok(SensitivityLevel(value))
        } else {
            Err(TaxonomyError::LevelOutOfRange(value))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// True for levels 3-5, the range treated as high-stakes by grading
    /// metrics and release policies.
    pub fn is_sensitive(self) -> bool {
        self.0 >= 3
    }
}

impl TryFrom<u8> for SensitivityLevel {
    type Error = TaxonomyError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        SensitivityLevel::new(value)
    }
}

impl TryFrom<i64> for SensitivityLevel {
    type Error = TaxonomyError;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        u8::try_from(value)
            .map_err(|_| TaxonomyError::LevelOutOfRange(value.clamp(0, 255) as u8))
            .and_then(SensitivityLevel::new)
    }
}

impl fmt::Display for SensitivityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl<'de> Deserialize<'de> for SensitivityLevel {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        let raw = u8::deserialize(deserializer)?;
        SensitivityLevel::new(raw).map_err(serde::de::Error::custom)
    }
}

/// Top-level grouping of the category vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    PersonalAttribute,
    HealthStatus,
    MedicalApplication,
    MedicalPayment,
    HealthResource,
    PublicHealth,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::PersonalAttribute => "personal_attribute",
            Group::HealthStatus => "health_status",
            Group::MedicalApplication => "medical_application",
            Group::MedicalPayment => "medical_payment",
            Group::HealthResource => "health_resource",
            Group::PublicHealth => "public_health",
        }
    }

    fn parse(raw: &str) -> Result<Self, TaxonomyError> {
        match raw {
            "personal_attribute" => Ok(Group::PersonalAttribute),
            "health_status" => Ok(Group::HealthStatus),
            "medical_application" => Ok(Group::MedicalApplication),
            "medical_payment" => Ok(Group::MedicalPayment),
            "health_resource" => Ok(Group::HealthResource),
            "public_health" => Ok(Group::PublicHealth),
            other => Err(TaxonomyError::UnknownGroup(other.to_string())),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A leaf category identified by its canonical slug.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Category {
    pub group: Group,
    pub slug: String,
}

/// One vocabulary entry: a leaf category plus its display label, parent
/// subcategory, default sensitivity level, and free-form annotation notes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyEntry {
    pub category: Category,
    pub label: String,
    pub subcategory: String,
    pub default_level: SensitivityLevel,
    pub notes: String,
}

/// The loaded vocabulary: entries in document order plus a slug index.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    pub version: String,
    entries: Vec<TaxonomyEntry>,
    by_slug: HashMap<String, usize>,
}

/// Errors raised while loading or querying the vocabulary.
#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("malformed taxonomy document: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("failed to read taxonomy file: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("sensitivity level {0} is outside the 1-5 range")]
    LevelOutOfRange(u8),
    #[error("duplicate leaf slug `{0}`")]
    DuplicateLeaf(String),
    #[error("leaf slug must not be empty (group `{0}`)")]
    EmptySlug(String),
}

#[derive(Deserialize)]
struct RawDocument {
    version: String,
    groups: Vec<RawGroup>,
}

#[derive(Deserialize)]
struct RawGroup {
    name: String,
    #[allow(dead_code)]
    label: Option<String>,
    #[serde(default)]
    leaves: Vec<RawLeaf>,
}

#[derive(Deserialize)]
struct RawLeaf {
    slug: String,
    label: String,
    level: u8,
    #[serde(default)]
    subcategory: String,
    #[serde(default)]
    notes: String,
}

const BUNDLED_TAXONOMY: &str = include_str!("../assets/taxonomy.toml");

impl Taxonomy {
    /// Parses a vocabulary from TOML text.
    pub fn load_from_str(source: &str) -> Result<Self, TaxonomyError> {
        let raw: RawDocument = toml::from_str(source)?;
        let mut entries = Vec::new();
        let mut by_slug = HashMap::new();
        for group in raw.groups {
            let group_id = Group::parse(&group.name)?;
            for leaf in group.leaves {
                let slug = normalize_slug(&leaf.slug);
                if slug.is_empty() {
                    return Err(TaxonomyError::EmptySlug(group.name.clone()));
                }
                let level = SensitivityLevel::new(leaf.level)?;
                if by_slug.contains_key(&slug) {
                    return Err(TaxonomyError::DuplicateLeaf(slug));
                }
                by_slug.insert(slug.clone(), entries.len());
                entries.push(TaxonomyEntry {
                    category: Category {
                        group: group_id,
                        slug,
                    },
                    label: leaf.label,
                    subcategory: leaf.subcategory,
                    default_level: level,
                    notes: leaf.notes,
                });
            }
        }
        Ok(Taxonomy {
            version: raw.version,
            entries,
            by_slug,
        })
    }

    /// Loads a vocabulary from a TOML file on disk.
    pub fn load_path(path: &Path) -> Result<Self, TaxonomyError> {
        let source = std::fs::read_to_string(path)?;
        Self::load_from_str(&source)
    }

    /// The vocabulary compiled into the binary.
    pub fn bundled() -> Self {
        Self::load_from_str(BUNDLED_TAXONOMY).expect("bundled taxonomy must parse")
    }

    /// All entries in document order.
    pub fn entries(&self) -> &[TaxonomyEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Looks up a raw category string after normalization; returns the entry
    /// if the string names a known leaf.
    pub fn resolve(&self, raw_category: &str) -> Option<&TaxonomyEntry> {
        let slug = normalize_slug(raw_category);
        self.by_slug.get(&slug).map(|&idx| &self.entries[idx])
    }

    /// Whether a raw category string names a leaf in the vocabulary.
    pub fn is_compatible(&self, raw_category: &str) -> bool {
        self.resolve(raw_category).is_some()
    }

    /// The default sensitivity level for a raw category string, if known.
    pub fn default_level(&self, raw_category: &str) -> Option<SensitivityLevel> {
        self.resolve(raw_category).map(|entry| entry.default_level)
    }

    /// Canonical slugs in document order, e.g. for schema enums.
    pub fn slugs(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.category.slug.as_str())
    }
}
