//! Grading metrics over a gold corpus and a prediction set.
//!
//! Four metrics are reported:
//!
//! * **MCIF** — mean count inflation factor: the per-record ratio of
//!   distinct predicted triples to distinct gold triples, averaged over
//!   records with non-empty gold. Values above 1 indicate over-extraction,
//!   below 1 under-extraction.
//! * **MCCR** — mean category compliance rate: the per-record fraction
//!   `accepted / (accepted + bad-category rejections)` taken from validator
//!   counters, averaged over records with at least one such item.
//! * **MSGR** — sensitivity grading rate: over matched gold/prediction
//!   pairs where either side is level 3-5, the pooled fraction whose levels
//!   agree exactly. (Some write-ups abbreviate the same quantity MSGQ.)
//! * **Max-level micro-F1** — each record's maximum level is treated as a
//!   single 5-class label; micro-averaged F1 over those labels. A record
//!   with no predicted triples counts as a false negative only, so when
//!   every record has a prediction micro-F1 equals plain accuracy.
//!
//! Metrics with nothing to score (for example MSGR on a corpus with no
//! sensitive pairs) report 1.0 and say so through their counters.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::normalize::normalize_entity;
use crate::pipeline::RecordRejections;
use crate::validator::Triple;

/// Triples for one record, used for both gold and predicted sides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordTriples {
    pub record_id: String,
    pub triples: Vec<Triple>,
}

/// Errors raised when the gold and prediction sets do not line up.
#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("duplicate record id `{0}` in gold corpus")]
    DuplicateGold(String),
    #[error("duplicate record id `{0}` in predictions")]
    DuplicatePrediction(String),
    #[error("no prediction entry for gold record `{0}`")]
    MissingPrediction(String),
    #[error("prediction for unknown record `{0}`")]
    UnknownPrediction(String),
    #[error("gold corpus is empty")]
    EmptyCorpus,
}

/// Per-record working numbers, exposed for error analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDiagnostics {
    pub record_id: String,
    pub gold_count: usize,
    pub predicted_count: usize,
    pub matched: usize,
    pub sensitive_pairs: usize,
    pub sensitive_correct: usize,
    pub gold_max_level: Option<u8>,
    pub predicted_max_level: Option<u8>,
}

/// The full evaluation result: the four metrics plus their counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mcif: f64,
    pub mccr: f64,
    pub msgr: f64,
    pub micro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub records_total: usize,
    pub mcif_scored: usize,
    pub mcif_skipped_empty_gold: usize,
    pub mccr_scored: usize,
    pub mccr_skipped_no_items: usize,
    pub msgr_pairs: usize,
    pub msgr_correct: usize,
    pub f1_true_positives: usize,
    pub f1_false_positives: usize,
    pub f1_false_negatives: usize,
    pub records_without_prediction: usize,
    pub per_record: Vec<RecordDiagnostics>,
}

/// Matching key: entity after normalization plus the canonical slug.
fn match_key(triple: &Triple) -> (String, String) {
    (
        normalize_entity(&triple.entity),
        triple.category.slug.clone(),
    )
}

/// Key used when counting distinct triples for MCIF.
fn distinct_key(triple: &Triple) -> (String, String, u8) {
    (
        normalize_entity(&triple.entity),
        triple.category.slug.clone(),
        triple.level.get(),
    )
}

fn distinct_count(triples: &[Triple]) -> usize {
    triples
        .iter()
        .map(distinct_key)
        .collect::<HashSet<_>>()
        .len()
}

/// Greedy injective matching between gold and predicted triples on
/// (normalized entity, category slug), walking gold in order.
///
/// Matching runs in two passes: exact (entity, category, level) pairs first,
/// then remaining pairs on (entity, category) alone. The second pass picks,
/// among the surviving candidates, the one whose level is closest to gold
/// (ties to the lower level), so the matched level pairs — and every metric
/// derived from them — do not depend on prediction order.
pub fn match_triples(gold: &[Triple], predicted: &[Triple]) -> Vec<(usize, usize)> {
    let gold_keys: Vec<_> = gold.iter().map(match_key).collect();
    let pred_keys: Vec<_> = predicted.iter().map(match_key).collect();
    let mut used = vec![false; predicted.len()];
    let mut matched_gold = vec![false; gold.len()];
    let mut pairs = Vec::new();

    for (gi, g) in gold.iter().enumerate() {
        for (pi, p) in predicted.iter().enumerate() {
            if used[pi] || p.level != g.level || pred_keys[pi] != gold_keys[gi] {
                continue;
            }
            used[pi] = true;
            matched_gold[gi] = true;
            pairs.push((gi, pi));
            break;
        }
    }

    for (gi, g) in gold.iter().enumerate() {
        if matched_gold[gi] {
            continue;
        }
        let best = predicted
            .iter()
            .enumerate()
            .filter(|&(pi, _)| !used[pi] && pred_keys[pi] == gold_keys[gi])
            .min_by_key(|&(_, p)| {
                let distance = (i16::from(p.level.get()) - i16::from(g.level.get())).abs();
                (distance, p.level.get())
            });
        if let Some((pi, _)) = best {
            used[pi] = true;
            pairs.push((gi, pi));
        }
    }
    pairs.sort_unstable();
    pairs
}

fn max_level(triples: &[Triple]) -> Option<u8> {
    triples.iter().map(|t| t.level.get()).max()
}

/// Evaluates predictions against gold. `rejections` supplies validator
/// counters for MCCR; without it every prediction item is assumed compliant
/// and MCCR reflects only record coverage.
pub fn evaluate(
    gold: &[RecordTriples],
    predictions: &[RecordTriples],
    rejections: Option<&[RecordRejections]>,
) -> Result<MetricsReport, MetricsError> {
    if gold.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut gold_ids = HashSet::new();
    for record in gold {
        if !gold_ids.insert(record.record_id.as_str()) {
            return Err(MetricsError::DuplicateGold(record.record_id.clone()));
        }
    }
    let mut by_id: HashMap<&str, &RecordTriples> = HashMap::new();
    for record in predictions {
        if by_id.insert(record.record_id.as_str(), record).is_some() {
            return Err(MetricsError::DuplicatePrediction(record.record_id.clone()));
        }
        if !gold_ids.contains(record.record_id.as_str()) {
            return Err(MetricsError::UnknownPrediction(record.record_id.clone()));
        }
    }
    let rejection_map: HashMap<&str, &RecordRejections> = rejections
        .unwrap_or(&[])
        .iter()
        .map(|r| (r.record_id.as_str(), r))
        .collect();

    let mut mcif_sum = 0.0;
    let mut mcif_scored = 0usize;
    let mut mccr_sum = 0.0;
    let mut mccr_scored = 0usize;
    let mut msgr_pairs = 0usize;
    let mut msgr_correct = 0usize;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut without_prediction = 0usize;
    let mut per_record = Vec::with_capacity(gold.len());

    for record in gold {
        let predicted = by_id
            .get(record.record_id.as_str())
            .copied()
            .ok_or_else(|| MetricsError::MissingPrediction(record.record_id.clone()))?;

        let gold_count = distinct_count(&record.triples);
        let predicted_count = distinct_count(&predicted.triples);
        if gold_count > 0 {
            mcif_sum += predicted_count as f64 / gold_count as f64;
            mcif_scored += 1;
        }

        let (accepted, bad_category) = match rejection_map.get(record.record_id.as_str()) {
            Some(rej) => (rej.counts.accepted_items, rej.counts.bad_category),
            None => (predicted.triples.len(), 0),
        };
        if accepted + bad_category > 0 {
            mccr_sum += accepted as f64 / (accepted + bad_category) as f64;
            mccr_scored += 1;
        }

        let pairs = match_triples(&record.triples, &predicted.triples);
        let mut sensitive_pairs = 0usize;
        let mut sensitive_correct = 0usize;
        for &(gi, pi) in &pairs {
            let g_level = record.triples[gi].level.get();
            let p_level = predicted.triples[pi].level.get();
            if g_level >= 3 || p_level >= 3 {
                sensitive_pairs += 1;
                if g_level == p_level {
                    sensitive_correct += 1;
                }
            }
        }
        msgr_pairs += sensitive_pairs;
        msgr_correct += sensitive_correct;

        let gold_max = max_level(&record.triples);
        let predicted_max = max_level(&predicted.triples);
        if let Some(gold_max) = gold_max {
            match predicted_max {
                None => {
                    without_prediction += 1;
                    fn_ += 1;
                }
                Some(predicted_max) if predicted_max == gold_max => tp += 1,
                Some(_) => {
                    fp += 1;
                    fn_ += 1;
                }
            }
        }

        per_record.push(RecordDiagnostics {
            record_id: record.record_id.clone(),
            gold_count,
            predicted_count,
            matched: pairs.len(),
            sensitive_pairs,
            sensitive_correct,
            gold_max_level: gold_max,
            predicted_max_level: predicted_max,
        });
    }

    let vacuous = 1.0;
    let mcif = if mcif_scored > 0 {
        mcif_sum / mcif_scored as f64
    } else {
        vacuous
    };
    let mccr = if mccr_scored > 0 {
        mccr_sum / mccr_scored as f64
    } else {
        vacuous
    };
    let msgr = if msgr_pairs > 0 {
        msgr_correct as f64 / msgr_pairs as f64
    } else {
        vacuous
    };
    let micro_precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else if tp + fn_ == 0 {
        vacuous
    } else {
        0.0
    };
    let micro_recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        vacuous
    };
    let micro_f1 = if 2 * tp + fp + fn_ > 0 {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    } else {
        vacuous
    };

    Ok(MetricsReport {
        mcif,
        mccr,
        msgr,
        micro_f1,
        micro_precision,
        micro_recall,
        records_total: gold.len(),
        mcif_scored,
        mcif_skipped_empty_gold: gold.len() - mcif_scored,
        mccr_scored,
        mccr_skipped_no_items: gold.len() - mccr_scored,
        msgr_pairs,
        msgr_correct,
        f1_true_positives: tp,
        f1_false_positives: fp,
        f1_false_negatives: fn_,
        records_without_prediction: without_prediction,
        per_record,
    })
}

/// Mean count inflation factor alone; see `evaluate`.
pub fn mcif(gold: &[RecordTriples], predictions: &[RecordTriples]) -> Result<f64, MetricsError> {
    evaluate(gold, predictions, None).map(|r| r.mcif)
}

/// Mean category compliance rate alone; see `evaluate`.
pub fn mccr(
    gold: &[RecordTriples],
    predictions: &[RecordTriples],
    rejections: &[RecordRejections],
) -> Result<f64, MetricsError> {
    evaluate(gold, predictions, Some(rejections)).map(|r| r.mccr)
}

/// Sensitivity grading rate alone; see `evaluate`.
pub fn msgr(gold: &[RecordTriples], predictions: &[RecordTriples]) -> Result<f64, MetricsError> {
    evaluate(gold, predictions, None).map(|r| r.msgr)
}

/// Max-level micro-F1 alone; see `evaluate`.
pub fn micro_f1_max_level(
    gold: &[RecordTriples],
    predictions: &[RecordTriples],
) -> Result<f64, MetricsError> {
    evaluate(gold, predictions, None).map(|r| r.micro_f1)
}
