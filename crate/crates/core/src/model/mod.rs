//! Guilt classifier, label-broadcast sentencing regressor, the joint
//! multi-task model, and their losses.

mod checkpoint;
mod classifier;
mod joint;
mod regressor;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::corpus::{JudicialCase, Role};
use crate::encoder::Tokenizer;
use crate::error::{invalid, Error, Result};
use crate::preprocess::{apply_masking, Strategy};

pub use checkpoint::{
    load_checkpoint, read_predictions, save_checkpoint, write_predictions, Checkpoint, ModelKind, PredictionRecord,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use classifier::GuiltClassifier;
pub use joint::{joint_loss, JointConfig, JointModel, JointOutput, ATTENTION_READING};
pub use regressor::{BroadcastValue, Fusion, SentencingRegressor};

/// Probability floor used when evaluating log-loss.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuiltPrediction {
    /// Probability of principal.
    pub p: f64,
    pub label: Role,
}

impl GuiltPrediction {
    /// Ties at the threshold go to principal.
    pub fn from_probability(p: f64, threshold: f64) -> GuiltPrediction {
        let label = if p >= threshold { Role::Principal } else { Role::Accomplice };
        GuiltPrediction { p, label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgmentPrediction {
    pub guilt: GuiltPrediction,
    /// Clamped to `[0, prison_max]`.
    pub months: f64,
    pub raw_months: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedState {
    pub h_fused: Array1<f64>,
}

/// `h_cls + value · 1`.
pub fn broadcast_value(h_cls: &ArrayView1<f64>, value: f64, d: usize) -> Result<FusedState> {
    if h_cls.len() != d {
        return Err(Error::Shape { expected: d, actual: h_cls.len() });
    }
    Ok(FusedState { h_fused: h_cls.mapv(|x| x + value) })
}

/// Adds the guilt label (0 or 1) to every coordinate of `h_cls`.
pub fn broadcast_fuse(h_cls: &ArrayView1<f64>, guilt_label: u8, d: usize) -> Result<FusedState> {
    if guilt_label > 1 {
        return Err(invalid(format!("guilt label must be 0 or 1, got {guilt_label}")));
    }
    broadcast_value(h_cls, f64::from(guilt_label), d)
}

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(invalid("loss over an empty batch"));
    }
    if a != b {
        return Err(Error::Shape { expected: a, actual: b });
    }
    Ok(())
}

pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(probs.len(), labels.len())?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            let y = f64::from(y);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// `∂ bce / ∂ p_i` (inside the clamp).
pub fn bce_grad(probs: &[f64], labels: &[u8]) -> Result<Vec<f64>> {
    check_pair(probs.len(), labels.len())?;
    let n = probs.len() as f64;
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            let y = f64::from(y);
            (-(y / p) + (1.0 - y) / (1.0 - p)) / n
        })
        .collect())
}

pub fn mse_loss(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds.len(), targets.len())?;
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / preds.len() as f64)
}

pub fn mse_grad(preds: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    check_pair(preds.len(), targets.len())?;
    let n = preds.len() as f64;
    Ok(preds.iter().zip(targets).map(|(p, t)| 2.0 * (p - t) / n).collect())
}

/// Softmax cross-entropy for one example; index 1 is principal.
pub fn cross_entropy(logits: &ArrayView1<f64>, role: Role) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[usize::from(role.label())]
}

/// Everything needed to run the two-stage pipeline on raw case text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmsiPipeline {
    pub tokenizer: Tokenizer,
    pub strategy: Strategy,
    pub max_len: usize,
    pub classifier: GuiltClassifier,
    pub regressor: SentencingRegressor,
}

impl MmsiPipeline {
    /// Guilt from the fact description, then months from the pruned court
    /// view fused with the predicted label.
    pub fn mmsi_forward(&self, case: &JudicialCase, defendant: &str) -> Result<JudgmentPrediction> {
        let cv_d = case.cv_d.as_deref().ok_or_else(|| {
            Error::Validation(format!("case {} has no pruned court view; prune it first", case.id))
        })?;
        if case.defendant(defendant).is_none() {
            return Err(invalid(format!("case {} has no defendant `{defendant}`", case.id)));
        }
        let fd = apply_masking(&case.fd, defendant, self.strategy, &self.tokenizer, self.max_len)?;
        let guilt = self.classifier.predict_tokens(&fd)?;
        let cvd = apply_masking(cv_d, defendant, self.strategy, &self.tokenizer, self.max_len)?;
        let (raw_months, months) = self.regressor.months_for_tokens(&cvd, self.regressor.guilt_value(&guilt))?;
        Ok(JudgmentPrediction { guilt, months, raw_months })
    }
}
