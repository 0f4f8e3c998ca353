//! Thresholded decisions and micro-averaged precision, recall and F1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelspace::LabelSpace;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{predictions} prediction sets but {golds} gold sets")]
    LengthMismatch { predictions: usize, golds: usize },
}

/// Indices whose probability is at least `threshold`.
pub fn decide(probabilities: &[f64], threshold: f64) -> BTreeSet<usize> {
    probabilities.iter().enumerate().filter(|(_, &p)| p >= threshold).map(|(i, _)| i).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_label: Option<BTreeMap<String, Counts>>,
    pub n_stays: usize,
    pub excluded_other: bool,
}

impl EvalReport {
    pub fn counts(&self) -> Counts {
        Counts { tp: self.tp, fp: self.fp, fn_: self.fn_ }
    }

    /// Flat `key: value` block; per-label counts as `label.<name>: tp fp fn`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_stays: {}", self.n_stays);
        let _ = writeln!(s, "excluded_other: {}", self.excluded_other);
        let _ = writeln!(s, "tp: {}", self.tp);
        let _ = writeln!(s, "fp: {}", self.fp);
        let _ = writeln!(s, "fn: {}", self.fn_);
        let _ = writeln!(s, "precision: {:.6}", self.precision);
        let _ = writeln!(s, "recall: {:.6}", self.recall);
        let _ = writeln!(s, "f1: {:.6}", self.f1);
        for (label, c) in self.per_label.iter().flatten() {
            let _ = writeln!(s, "label.{label}: {} {} {}", c.tp, c.fp, c.fn_);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Pools counts over every stay and label, then scores once.
pub fn micro_prf(
    predictions: &[BTreeSet<usize>],
    golds: &[BTreeSet<usize>],
    exclude_other: bool,
    space: &LabelSpace,
) -> Result<EvalReport, MetricsError> {
    if predictions.len() != golds.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), golds: golds.len() });
    }
    let skip = if exclude_other { space.other_index() } else { None };
    let mut per_label = vec![Counts::default(); space.len()];
    for (pred, gold) in predictions.iter().zip(golds) {
        for &i in pred {
            if Some(i) == skip {
                continue;
            }
            if gold.contains(&i) {
                per_label[i].tp += 1;
            } else {
                per_label[i].fp += 1;
            }
        }
        for &i in gold.difference(pred) {
            if Some(i) != skip {
                per_label[i].fn_ += 1;
            }
        }
    }
    let mut total = Counts::default();
    for c in &per_label {
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
    }
    let per_label = per_label
        .into_iter()
        .enumerate()
        .filter(|&(i, c)| Some(i) != skip && c != Counts::default())
        .map(|(i, c)| (space.label(i).to_string(), c))
        .collect();
    Ok(EvalReport {
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        precision: total.precision(),
        recall: total.recall(),
        f1: total.f1(),
        per_label: Some(per_label),
        n_stays: predictions.len(),
        excluded_other: exclude_other,
    })
}
