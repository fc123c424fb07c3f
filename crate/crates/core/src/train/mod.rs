//! Optimizer, training loops with best-epoch selection, and the resampling
//! protocol.

mod protocol;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::nn::{zeros_like, Params};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::{classification_metrics, regression_metrics, ClassificationMetrics, RegressionMetrics};
use crate::model::{
    GuiltClassifier, GuiltPrediction, JointConfig, JointModel, PredictionRecord, SentencingRegressor, Fusion,
};
use crate::preprocess::{MaskedSample, TextSource};
use crate::seed;

pub use protocol::{
    aggregate, confidence_interval, prediction_metrics, prepare_split, run_protocol, run_single, AggregateReport, MetricSummary,
    PreparedSplit, ProtocolConfig, ProtocolCounts, RunOutcome, RunRecord, TaskSpec, TrainedModel,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    #[default]
    GroundTruth,
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Guilt fed to the regressor during training.
    pub label_source: LabelSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 16,
            epochs: 10,
            dropout: 0.1,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            label_source: LabelSource::GroundTruth,
        }
    }
}

impl TrainConfig {
    /// Settings for training the small encoder from scratch.
    pub fn desk() -> Self {
        TrainConfig { learning_rate: 1e-3, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config("weight_decay and clip_norm must be ≥ 0".into()));
        }
        Ok(())
    }

    fn encoder(&self, encoder: &EncoderConfig) -> EncoderConfig {
        EncoderConfig { dropout: self.dropout, ..encoder.clone() }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: T,
    v: T,
    t: i32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Params + Clone> AdamW<T> {
    pub fn new(model: &T, lr: f64, weight_decay: f64) -> Self {
        AdamW { m: zeros_like(model), v: zeros_like(model), t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    pub fn step(&mut self, model: &mut T, grad: &T) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
        for (((p, g), m), v) in model.params_mut().into_iter().zip(grad.params()).zip(self.m.params_mut()).zip(self.v.params_mut()) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p[i] -= lr * (update + wd * p[i]);
            }
        }
    }
}

pub fn global_norm<T: Params>(grad: &T) -> f64 {
    grad.params().iter().flat_map(|p| p.iter()).map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grad` to norm `max` if it is larger; returns the norm before.
pub fn clip_global_norm<T: Params>(grad: &mut T, max: f64) -> f64 {
    let norm = global_norm(grad);
    if max > 0.0 && norm > max {
        let s = max / norm;
        for p in grad.params_mut() {
            p.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// The selection metric on the validation set.
    pub val_metric: f64,
    pub max_grad_norm: f64,
    pub clipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Name of the validation metric used for selection.
    pub selection: String,
    pub higher_is_better: bool,
    pub clip_norm: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
}

/// Shuffled minibatch descent; returns the parameters from the epoch with
/// the best validation metric (earliest on ties).
fn fit<M: Params + Clone>(
    mut model: M,
    n_train: usize,
    cfg: &TrainConfig,
    selection: (&str, bool),
    mut example: impl FnMut(&M, usize, u64, f64, &mut M) -> Result<f64>,
    mut validate: impl FnMut(&M) -> Result<f64>,
) -> Result<(M, History)> {
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::Validation("training set is empty".into()));
    }
    let (name, higher) = selection;
    let mut opt = AdamW::new(&model, cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut best: Option<(usize, f64, M)> = None;
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, "shuffle", epoch as u64)));
        let (mut total, mut max_norm, mut clipped) = (0.0, 0.0f64, 0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = zeros_like(&model);
            let weight = 1.0 / batch.len() as f64;
            for (k, &i) in batch.iter().enumerate() {
                let step = ((epoch as u64) << 32) | ((b * cfg.batch_size + k) as u64);
                let dropout_seed = seed::derive(cfg.seed, "dropout", step);
                total += example(&model, i, dropout_seed, weight, &mut grad)?;
            }
            let norm = clip_global_norm(&mut grad, cfg.clip_norm);
            max_norm = max_norm.max(norm);
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                clipped += 1;
            }
            opt.step(&mut model, &grad);
        }
        let val = validate(&model)?;
        if !val.is_finite() {
            return Err(Error::Validation(format!("validation {name} is not finite at epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: train loss {:.5}, val {name} {val:.5}", total / n_train as f64);
        records.push(EpochRecord {
            epoch,
            train_loss: total / n_train as f64,
            val_metric: val,
            max_grad_norm: max_norm,
            clipped_steps: clipped,
        });
        let improves = match &best {
            None => true,
            Some((_, b, _)) => (higher && val > *b) || (!higher && val < *b),
        };
        if improves {
            best = Some((epoch, val, model.clone()));
        }
    }
    let (best_epoch, best_val, best_model) = best.expect("at least one epoch");
    Ok((
        best_model,
        History {
            selection: name.into(),
            higher_is_better: higher,
            clip_norm: cfg.clip_norm,
            epochs: records,
            best_epoch,
            best_val_metric: best_val,
        },
    ))
}

fn nonempty(set: &[MaskedSample], what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Validation(format!("{what} set is empty")));
    }
    Ok(())
}

fn check_source(set: &[MaskedSample], source: TextSource, what: &str) -> Result<()> {
    if let Some(s) = set.iter().find(|s| s.source != source) {
        return Err(Error::Config(format!(
            "{what} expects {source} samples, got {} for {}/{}",
            s.source, s.case_id, s.target_name
        )));
    }
    Ok(())
}

/// Stage-1 predictions and metrics over a sample list.
pub fn evaluate_classifier(
    model: &GuiltClassifier,
    samples: &[MaskedSample],
) -> Result<(ClassificationMetrics, Vec<GuiltPrediction>)> {
    let preds = samples.iter().map(|s| model.infer_guilt(s)).collect::<Result<Vec<_>>>()?;
    let p: Vec<u8> = preds.iter().map(|g| g.label.label()).collect();
    let y: Vec<u8> = samples.iter().map(|s| s.guilt.label()).collect();
    Ok((classification_metrics(&p, &y)?, preds))
}

/// Clamped month predictions and metrics; `guilt[i]` is broadcast for
/// sample `i` (ignored without fusion).
pub fn evaluate_regressor(
    model: &SentencingRegressor,
    samples: &[MaskedSample],
    guilt: &[f64],
) -> Result<(RegressionMetrics, Vec<f64>)> {
    if guilt.len() != samples.len() {
        return Err(Error::Shape { expected: samples.len(), actual: guilt.len() });
    }
    let preds = samples
        .iter()
        .zip(guilt)
        .map(|(s, &g)| Ok(model.months_for_tokens(&s.tokens, g)?.1))
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<f64> = samples.iter().map(MaskedSample::months).collect();
    Ok((regression_metrics(&preds, &truths, model.prison_max)?, preds))
}

pub fn ground_truth_guilt(samples: &[MaskedSample]) -> Vec<f64> {
    samples.iter().map(|s| f64::from(s.guilt.label())).collect()
}

/// Trains a guilt classifier; selection by validation accuracy.
pub fn train_classifier(
    train: &[MaskedSample],
    val: &[MaskedSample],
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(GuiltClassifier, History)> {
    nonempty(train, "training")?;
    nonempty(val, "validation")?;
    let source = train[0].source;
    check_source(train, source, "classifier training")?;
    check_source(val, source, "classifier validation")?;
    let model = GuiltClassifier::new(cfg.encoder(encoder), source, seed::derive(cfg.seed, "init", 0))?;
    fit(
        model,
        train.len(),
        cfg,
        ("Acc", true),
        |m, i, ds, w, g| m.accumulate(&train[i], Some(ds), w, g),
        |m| Ok(evaluate_classifier(m, val)?.0.acc),
    )
}

/// Stage-1 output for the regressor's training and validation inputs.
#[derive(Debug, Clone, Copy)]
pub struct Stage1<'a> {
    pub classifier: &'a GuiltClassifier,
    /// Fact-description samples aligned with the regressor's train set.
    pub fd_train: &'a [MaskedSample],
    pub fd_val: &'a [MaskedSample],
}

impl Stage1<'_> {
    fn values(&self, reg: &SentencingRegressor, fd: &[MaskedSample], cvd: &[MaskedSample]) -> Result<Vec<f64>> {
        if fd.len() != cvd.len() {
            return Err(Error::Shape { expected: cvd.len(), actual: fd.len() });
        }
        fd.iter()
            .zip(cvd)
            .map(|(f, c)| {
                if !f.same_defendant(c) {
                    return Err(Error::InvalidArgument(format!(
                        "Stage-1 sample {}/{} does not match {}/{}",
                        f.case_id, f.target_name, c.case_id, c.target_name
                    )));
                }
                Ok(reg.guilt_value(&self.classifier.infer_guilt(f)?))
            })
            .collect()
    }
}

/// Trains a sentencing regressor on cv_d samples; selection by validation
/// ImpErr.
pub fn train_regressor(
    train: &[MaskedSample],
    val: &[MaskedSample],
    encoder: &EncoderConfig,
    prison_max: f64,
    fusion: Fusion,
    cfg: &TrainConfig,
    stage1: Option<Stage1<'_>>,
) -> Result<(SentencingRegressor, History)> {
    nonempty(train, "training")?;
    nonempty(val, "validation")?;
    check_source(train, TextSource::CvD, "regressor training")?;
    check_source(val, TextSource::CvD, "regressor validation")?;
    let model = SentencingRegressor::new(cfg.encoder(encoder), prison_max, fusion, seed::derive(cfg.seed, "init", 0))?;
    let (g_train, g_val) = match (cfg.label_source, fusion, stage1) {
        (_, Fusion::None, _) | (LabelSource::GroundTruth, _, _) => (ground_truth_guilt(train), ground_truth_guilt(val)),
        (LabelSource::Predicted, Fusion::Broadcast, Some(s1)) => {
            (s1.values(&model, s1.fd_train, train)?, s1.values(&model, s1.fd_val, val)?)
        }
        (LabelSource::Predicted, Fusion::Broadcast, None) => {
            return Err(Error::Config("label_source = predicted needs a trained guilt classifier".into()))
        }
    };
    fit(
        model,
        train.len(),
        cfg,
        ("ImpErr", false),
        |m, i, ds, w, g| m.accumulate(&train[i], g_train[i], Some(ds), w, g),
        |m| Ok(evaluate_regressor(m, val, &g_val)?.0.imp_err),
    )
}

fn check_aligned(fd: &[MaskedSample], cvd: &[MaskedSample]) -> Result<()> {
    if fd.len() != cvd.len() {
        return Err(Error::Shape { expected: fd.len(), actual: cvd.len() });
    }
    Ok(())
}

/// Mean joint loss (regression on the `months / prison_max` scale).
pub fn joint_validation_loss(model: &JointModel, fd: &[MaskedSample], cvd: &[MaskedSample], jc: &JointConfig) -> Result<f64> {
    check_aligned(fd, cvd)?;
    let mut total = 0.0;
    for (f, c) in fd.iter().zip(cvd) {
        let out = model.joint_forward(f, c)?;
        total += crate::model::joint_loss(
            &out.logits.view(),
            out.raw_months / model.prison_max,
            c.guilt,
            c.months() / model.prison_max,
            jc,
        )?;
    }
    Ok(total / fd.len() as f64)
}

/// Trains the joint model on aligned (fd, cv_d) lists; selection by
/// validation joint loss.
pub fn train_joint(
    fd_train: &[MaskedSample],
    cvd_train: &[MaskedSample],
    fd_val: &[MaskedSample],
    cvd_val: &[MaskedSample],
    encoder: &EncoderConfig,
    prison_max: f64,
    cfg: &TrainConfig,
    joint: &JointConfig,
) -> Result<(JointModel, History)> {
    joint.validate()?;
    nonempty(fd_train, "training")?;
    nonempty(fd_val, "validation")?;
    check_aligned(fd_train, cvd_train)?;
    check_aligned(fd_val, cvd_val)?;
    let model = JointModel::new(cfg.encoder(encoder), prison_max, seed::derive(cfg.seed, "init", 0))?;
    fit(
        model,
        fd_train.len(),
        cfg,
        ("joint_loss", false),
        |m, i, ds, w, g| m.accumulate(&fd_train[i], &cvd_train[i], joint, Some(ds), w, g),
        |m| joint_validation_loss(m, fd_val, cvd_val, joint),
    )
}

pub(crate) fn record(s: &MaskedSample) -> PredictionRecord {
    PredictionRecord {
        case_id: s.case_id.clone(),
        defendant: s.target_name.clone(),
        guilt_pred: None,
        p: None,
        guilt_true: Some(s.guilt),
        months_pred: None,
        months_true: None,
    }
}
