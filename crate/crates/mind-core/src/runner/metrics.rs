//! Diagnosis evaluation metrics: accuracy, per-class precision/recall/F1,
//! and macro-F1 over the fixed label set.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::case::DiagnosisLabel;

/// Counts and derived rates for one label. Every 0/0 rate is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    fn from_counts(tp: u64, fp: u64, fn_count: u64) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_count);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_count,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: BTreeMap<DiagnosisLabel, ClassMetrics>,
    /// Mean F1 over all four labels, including labels without cases.
    pub macro_f1: f64,
    pub n_cases: usize,
}

impl EvalReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "cases: {}  accuracy: {:.4}  macro-F1: {:.4}", self.n_cases, self.accuracy, self.macro_f1);
        let _ = writeln!(
            out,
            "{:<12} {:>5} {:>5} {:>5} {:>10} {:>8} {:>8}",
            "label", "tp", "fp", "fn", "precision", "recall", "f1"
        );
        for (label, m) in &self.per_class {
            let _ = writeln!(
                out,
                "{:<12} {:>5} {:>5} {:>5} {:>10.4} {:>8.4} {:>8.4}",
                label.as_str(),
                m.tp,
                m.fp,
                m.fn_count,
                m.precision,
                m.recall,
                m.f1
            );
        }
        out
    }
}

/// Scores (truth, prediction) pairs. A missing prediction (budget ran out)
/// counts as a false negative for the truth label and a false positive for
/// no label.
pub fn metrics_from_pairs(pairs: &[(DiagnosisLabel, Option<DiagnosisLabel>)]) -> EvalReport {
    let mut correct = 0u64;
    let mut tp: BTreeMap<DiagnosisLabel, u64> = BTreeMap::new();
    let mut fp: BTreeMap<DiagnosisLabel, u64> = BTreeMap::new();
    let mut fn_count: BTreeMap<DiagnosisLabel, u64> = BTreeMap::new();

    for (truth, pred) in pairs {
        match pred {
            Some(p) if p == truth => {
                correct += 1;
                *tp.entry(*truth).or_default() += 1;
            }
            Some(p) => {
                *fp.entry(*p).or_default() += 1;
                *fn_count.entry(*truth).or_default() += 1;
            }
            None => {
                *fn_count.entry(*truth).or_default() += 1;
            }
        }
    }

    let per_class: BTreeMap<DiagnosisLabel, ClassMetrics> = DiagnosisLabel::ALL
        .iter()
        .map(|label| {
            (
                *label,
                ClassMetrics::from_counts(
                    tp.get(label).copied().unwrap_or(0),
                    fp.get(label).copied().unwrap_or(0),
                    fn_count.get(label).copied().unwrap_or(0),
                ),
            )
        })
        .collect();
    let macro_f1 = per_class.values().map(|m| m.f1).sum::<f64>() / per_class.len() as f64;
    let accuracy = if pairs.is_empty() {
        0.0
    } else {
        correct as f64 / pairs.len() as f64
    };
    EvalReport {
        accuracy,
        per_class,
        macro_f1,
        n_cases: pairs.len(),
    }
}
