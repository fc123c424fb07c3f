//! Classification metrics and the three imprisonment-term scores.
//!
//! Natural logarithm is used for the log-distance `h` in [`score1`]; bucket
//! boundaries are inclusive on their upper edge.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Report field names, in the order they appear in metrics files.
pub const IMP_SCORE: &str = "ImpScore";
pub const IMP_ACC: &str = "ImpAcc";
pub const IMP_ERR: &str = "ImpErr";
pub const ACC: &str = "Acc";
pub const PRECISION: &str = "P";
pub const RECALL: &str = "R";
pub const F1: &str = "F1";

fn check_nonneg(y: f64, y_hat: f64) -> Result<()> {
    if !(y >= 0.0 && y_hat >= 0.0) {
        return Err(invalid(format!("prison terms must be nonnegative, got y={y}, ŷ={y_hat}")));
    }
    Ok(())
}

/// Log distance between predicted and true months.
pub fn log_distance(y: f64, y_hat: f64) -> f64 {
    ((y_hat + 1.0).ln() - (y + 1.0).ln()).abs()
}

/// Bucketed log-distance score in {0, 0.2, 0.4, 0.6, 0.8, 1}.
pub fn score1(y: f64, y_hat: f64) -> Result<f64> {
    check_nonneg(y, y_hat)?;
    let h = log_distance(y, y_hat);
    Ok(if h <= 0.2 {
        1.0
    } else if h <= 0.4 {
        0.8
    } else if h <= 0.6 {
        0.6
    } else if h <= 0.8 {
        0.4
    } else if h <= 1.0 {
        0.2
    } else {
        0.0
    })
}

/// 1 when the prediction falls within ±25% of the true term.
///
/// For `y = 0` the band collapses: only an exact zero prediction scores.
pub fn score2(y: f64, y_hat: f64) -> Result<f64> {
    check_nonneg(y, y_hat)?;
    Ok(if (y - y_hat).abs() <= 0.25 * y { 1.0 } else { 0.0 })
}

/// Absolute error normalized by the maximum term.
pub fn score3(y: f64, y_hat: f64, prison_max: f64) -> Result<f64> {
    if !(prison_max > 0.0) {
        return Err(invalid(format!("prison_max must be positive, got {prison_max}")));
    }
    Ok((y_hat - y).abs() / prison_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub imp_score: f64,
    pub imp_acc: f64,
    pub imp_err: f64,
    /// `(score1, score2, score3)` per sample, in input order.
    pub per_sample: Vec<(f64, f64, f64)>,
}

impl RegressionMetrics {
    pub fn len(&self) -> usize {
        self.per_sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample.is_empty()
    }
}

pub fn regression_metrics(preds: &[f64], truths: &[f64], prison_max: f64) -> Result<RegressionMetrics> {
    if preds.len() != truths.len() {
        return Err(invalid(format!(
            "{} predictions for {} targets",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(invalid("regression metrics need at least one sample"));
    }
    let per_sample = preds
        .iter()
        .zip(truths)
        .map(|(&p, &y)| Ok((score1(y, p)?, score2(y, p)?, score3(y, p, prison_max)?)))
        .collect::<Result<Vec<_>>>()?;
    let n = per_sample.len() as f64;
    let (s1, s2, s3) = per_sample
        .iter()
        .fold((0.0, 0.0, 0.0), |acc, s| (acc.0 + s.0, acc.1 + s.1, acc.2 + s.2));
    Ok(RegressionMetrics {
        imp_score: s1 / n,
        imp_acc: s2 / n,
        imp_err: s3 / n,
        per_sample,
    })
}

/// Binary classification metrics with principal (1) as the positive class.
///
/// Precision or recall with a zero denominator is reported as 0 and flagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

pub fn classification_metrics(preds: &[u8], labels: &[u8]) -> Result<ClassificationMetrics> {
    if preds.len() != labels.len() {
        return Err(invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(invalid("classification metrics need at least one sample"));
    }
    if preds.iter().chain(labels).any(|&v| v > 1) {
        return Err(invalid("labels must be 0 or 1"));
    }
    let mut correct = 0usize;
    let mut tp = 0usize;
    let mut pred_pos = 0usize;
    let mut true_pos = 0usize;
    for (&p, &y) in preds.iter().zip(labels) {
        correct += usize::from(p == y);
        tp += usize::from(p == 1 && y == 1);
        pred_pos += usize::from(p == 1);
        true_pos += usize::from(y == 1);
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, pred_pos);
    let recall = ratio(tp, true_pos);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ClassificationMetrics {
        acc: correct as f64 / preds.len() as f64,
        precision,
        recall,
        f1,
        precision_undefined: pred_pos == 0,
        recall_undefined: true_pos == 0,
    })
}
