//! Binary classification metrics. The positive class is label 1 (covid).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same counts with labels 0 and 1 exchanged.
    pub fn relabeled(&self) -> Self {
        Confusion { tp: self.tn, fp: self.fn_, fn_: self.fp, tn: self.tp }
    }
}

/// Predict positive iff `prob >= threshold`.
pub fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    if probs.len() != labels.len() {
        return Err(Error::ShapeMismatch { lhs: vec![probs.len()], rhs: vec![labels.len()] });
    }
    let mut c = Confusion::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y) {
            (true, 1) => c.tp += 1,
            (true, 0) => c.fp += 1,
            (false, 1) => c.fn_ += 1,
            (false, 0) => c.tn += 1,
            (_, other) => return Err(Error::Config(format!("label {other} is not binary"))),
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn class_scores(tp: u64, fp: u64, fn_: u64, class: &str) -> ClassScores {
    if tp + fp == 0 {
        log::warn!("no predictions for the {class} class; precision set to 0");
    }
    if tp + fn_ == 0 {
        log::warn!("no {class} instances; recall set to 0");
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    ClassScores { precision, recall, f1 }
}

/// Serialized with the fixed key names `recall_pos`, `precision_pos`,
/// `f1_pos`, `recall_neg`, `precision_neg`, `f1_neg`, `macro_f1`,
/// `threshold`, `tp`, `fp`, `fn`, `tn`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall_pos: f64,
    pub precision_pos: f64,
    pub f1_pos: f64,
    pub recall_neg: f64,
    pub precision_neg: f64,
    pub f1_neg: f64,
    pub macro_f1: f64,
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

pub const REPORT_KEYS: [&str; 12] = [
    "recall_pos",
    "precision_pos",
    "f1_pos",
    "recall_neg",
    "precision_neg",
    "f1_neg",
    "macro_f1",
    "threshold",
    "tp",
    "fp",
    "fn",
    "tn",
];

impl MetricsReport {
    pub fn from_confusion(c: Confusion, threshold: f64) -> Self {
        let pos = class_scores(c.tp, c.fp, c.fn_, "positive");
        let neg = class_scores(c.tn, c.fn_, c.fp, "negative");
        MetricsReport {
            recall_pos: pos.recall,
            precision_pos: pos.precision,
            f1_pos: pos.f1,
            recall_neg: neg.recall,
            precision_neg: neg.precision,
            f1_neg: neg.f1,
            macro_f1: (pos.f1 + neg.f1) / 2.0,
            threshold,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
        }
    }

    pub fn confusion(&self) -> Confusion {
        Confusion { tp: self.tp, fp: self.fp, fn_: self.fn_, tn: self.tn }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// `key: value` lines.
impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let floats = [
            ("recall_pos", self.recall_pos),
            ("precision_pos", self.precision_pos),
            ("f1_pos", self.f1_pos),
            ("recall_neg", self.recall_neg),
            ("precision_neg", self.precision_neg),
            ("f1_neg", self.f1_neg),
            ("macro_f1", self.macro_f1),
            ("threshold", self.threshold),
        ];
        for (k, v) in floats {
            writeln!(f, "{k}: {v:.6}")?;
        }
        for (k, v) in [("tp", self.tp), ("fp", self.fp), ("fn", self.fn_), ("tn", self.tn)] {
            writeln!(f, "{k}: {v}")?;
        }
        Ok(())
    }
}

/// Macro F1 of a confusion matrix along with the full report.
pub fn macro_f1(c: Confusion) -> (f64, MetricsReport) {
    let report = MetricsReport::from_confusion(c, DEFAULT_THRESHOLD);
    (report.macro_f1, report)
}

pub fn evaluate(probs: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    Ok(MetricsReport::from_confusion(confusion(probs, labels, threshold)?, threshold))
}
