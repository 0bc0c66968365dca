//! Category-by-sensitivity reporting: per-level category counts, within-level
//! shares, and plot-ready tables.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::TripleRow;
use crate::taxonomy::SensitivityLevel;

/// Label used for the remainder bucket aggregating categories beyond `top_k`.
pub const OTHER_BUCKET: &str = "other";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One category's count and within-level share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionEntry {
    pub category: String,
    pub count: usize,
    pub share: f64,
}

/// Category distribution for a single sensitivity level: the top categories
/// by count (ties broken by slug), an `other` bucket for the rest, and the
/// level's total. Shares are within-level and sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDistribution {
    pub level: SensitivityLevel,
    pub entries: Vec<DistributionEntry>,
    pub total: usize,
}

/// Counts (category, level) occurrences and reports, for each level present,
/// the `top_k` categories plus an `other` remainder bucket. Distributions
/// come back sorted by level ascending. Rows whose level is outside 1-5 are
/// ignored; `top_k` of 0 sends every category to the `other` bucket.
pub fn stratify(rows: &[TripleRow], top_k: usize) -> Vec<LevelDistribution> {
    let mut by_level: BTreeMap<u8, BTreeMap<&str, usize>> = BTreeMap::new();
    for row in rows {
        if let Ok(level) = SensitivityLevel::new(row.level) {
            *by_level
                .entry(level.get())
                .or_default()
                .entry(row.category.as_str())
                .or_default() += 1;
        }
    }

    by_level
        .into_iter()
        .map(|(level, counts)| {
            let total: usize = counts.values().sum();
            let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

            let mut entries: Vec<DistributionEntry> = ranked
                .iter()
                .take(top_k)
                .map(|&(category, count)| DistributionEntry {
                    category: category.to_string(),
                    count,
                    share: count as f64 / total as f64,
                })
                .collect();
            let remainder: usize = ranked.iter().skip(top_k).map(|&(_, c)| c).sum();
            if remainder > 0 {
                entries.push(DistributionEntry {
                    category: OTHER_BUCKET.to_string(),
                    count: remainder,
                    share: remainder as f64 / total as f64,
                });
            }
            LevelDistribution {
                level: SensitivityLevel::new(level).expect("level validated above"),
                entries,
                total,
            }
        })
        .collect()
}

/// Writes distributions as a delimited table `level,category,count,share`
/// consumable by any plotting tool. Output is byte-deterministic; shares are
/// fixed to six decimals.
pub fn emit_plot_data(distributions: &[LevelDistribution], path: &Path) -> Result<(), ReportError> {
    let io_err = |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = File::create(path).map_err(io_err)?;
    writeln!(out, "level,category,count,share").map_err(io_err)?;
    for distribution in distributions {
        for entry in &distribution.entries {
            writeln!(
                out,
                "{},{},{},{:.6}",
                distribution.level.get(),
                entry.category,
                entry.count,
                entry.share
            )
            .map_err(io_err)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(category: &str, level: u8) -> TripleRow {
        TripleRow {
            record_id: "r".to_string(),
            entity: "x".to_string(),
            category: category.to_string(),
            category_label: String::new(),
            level,
            rules_fired: Vec::new(),
        }
    }

    #[test]
    fn single_triple_yields_one_full_share_entry() {
        let distributions = stratify(&[row("special-disease", 5)], 10);
        assert_eq!(distributions.len(), 1);
        let d = &distributions[0];
        assert_eq!(d.level.get(), 5);
        assert_eq!(d.total, 1);
        assert_eq!(d.entries.len(), 1);
        assert_eq!(d.entries[0].category, "special-disease");
        assert_eq!(d.entries[0].share, 1.0);
    }

    #[test]
    fn top_k_one_aggregates_the_rest_into_other() {
        let rows = vec![
            row("date", 3),
            row("date", 3),
            row("date", 3),
            row("body-temperature", 3),
            row("blood-pressure", 3),
        ];
        let distributions = stratify(&rows, 1);
        let d = &distributions[0];
        assert_eq!(d.entries.len(), 2);
        assert_eq!(d.entries[0].category, "date");
        assert_eq!(d.entries[0].count, 3);
        assert_eq!(d.entries[1].category, OTHER_BUCKET);
        assert_eq!(d.entries[1].count, 2);
        assert_eq!(d.total, 5);
        assert!((d.entries[0].share - 0.6).abs() < 1e-12);
        assert!((d.entries[1].share - 0.4).abs() < 1e-12);
    }

    #[test]
    fn shares_are_within_level_fractions() {
        // 3,536 chief-complaint rows among 11,499 level-2 rows: 30.75%.
        let mut rows = Vec::with_capacity(11_499);
        for _ in 0..3_536 {
            rows.push(row("chief-complaint", 2));
        }
        for i in 0..(11_499 - 3_536) {
            rows.push(row(if i % 2 == 0 { "disease" } else { "medication-name" }, 2));
        }
        // Rows at other levels must not dilute the level-2 shares.
        rows.push(row("patient-name", 4));
        let distributions = stratify(&rows, 10);
        let level2 = distributions.iter().find(|d| d.level.get() == 2).unwrap();
        assert_eq!(level2.total, 11_499);
        let chief = level2
            .entries
            .iter()
            .find(|e| e.category == "chief-complaint")
            .unwrap();
        assert_eq!(chief.count, 3_536);
        assert!((chief.share - 0.3075).abs() < 5e-5);
    }

    #[test]
    fn ties_break_by_category_slug() {
        let rows = vec![row("ward", 2), row("department", 2)];
        let d = &stratify(&rows, 10)[0];
        assert_eq!(d.entries[0].category, "department");
        assert_eq!(d.entries[1].category, "ward");
    }

    #[test]
    fn rows_with_bad_levels_are_ignored() {
        let distributions = stratify(&[row("disease", 0), row("disease", 9)], 10);
        assert!(distributions.is_empty());
    }

    #[test]
    fn plot_data_is_byte_deterministic_and_bounded() {
        let mut rows = Vec::new();
        for level in 1..=5u8 {
            for c in 0..12 {
                for _ in 0..=(c % 3) {
                    rows.push(row(&format!("cat-{c:02}"), level));
                }
            }
        }
        let distributions = stratify(&rows, 10);
        // Five levels, at most top-10 plus one `other` row each.
        let row_count: usize = distributions.iter().map(|d| d.entries.len()).sum();
        assert!(row_count <= 55, "{row_count}");

        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        emit_plot_data(&distributions, &a).unwrap();
        emit_plot_data(&distributions, &b).unwrap();
        let bytes_a = std::fs::read(&a).unwrap();
        assert_eq!(bytes_a, std::fs::read(&b).unwrap());
        let text = String::from_utf8(bytes_a).unwrap();
        assert!(text.starts_with("level,category,count,share\n"));
        assert!(text.contains("1,cat-02,3,"));
    }

    #[test]
    fn empty_input_emits_header_only() {
        let distributions = stratify(&[], 10);
        assert!(distributions.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.csv");
        emit_plot_data(&distributions, &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "level,category,count,share\n"
        );
    }

    proptest! {
        #[test]
        fn conservation_sorting_and_share_sums_hold(
            rows in proptest::collection::vec((0usize..8, 1u8..=5), 0..60),
            top_k in 0usize..6,
        ) {
            let rows: Vec<TripleRow> = rows
                .into_iter()
                .map(|(c, level)| row(&format!("cat-{c}"), level))
                .collect();
            let distributions = stratify(&rows, top_k);

            // Conservation: level totals add up to the input size.
            let total: usize = distributions.iter().map(|d| d.total).sum();
            prop_assert_eq!(total, rows.len());

            for d in &distributions {
                let sum: usize = d.entries.iter().map(|e| e.count).sum();
                prop_assert_eq!(sum, d.total);
                let share_sum: f64 = d.entries.iter().map(|e| e.share).sum();
                prop_assert!((share_sum - 1.0).abs() < 1e-9);
                prop_assert!(d.entries.iter().all(|e| e.count > 0));

                // Ranked prefix (everything before `other`) is sorted by
                // count descending, slug ascending on ties, and within top_k.
                let ranked: Vec<&DistributionEntry> = d
                    .entries
                    .iter()
                    .take_while(|e| e.category != OTHER_BUCKET)
                    .collect();
                prop_assert!(ranked.len() <= top_k);
                prop_assert!(d.entries.len() <= top_k + 1);
                for pair in ranked.windows(2) {
                    let keep = pair[0].count > pair[1].count
                        || (pair[0].count == pair[1].count
                            && pair[0].category < pair[1].category);
                    prop_assert!(keep, "unsorted: {:?}", d.entries);
                }
            }
        }
    }
}
