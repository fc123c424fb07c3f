//! Integrated-gradients attribution, top-k selection, comprehensiveness,
//! attention export and token-frequency tables.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::Role;
use crate::encoder::nn::{sigmoid, zeros_like};
use crate::encoder::{key_mask, EncoderBackend, EncoderOutput, TokenSequence, PAD_ID};
use crate::error::{Error, Result};
use crate::metrics::{self, classification_metrics, regression_metrics};
use crate::model::{GuiltClassifier, SentencingRegressor};
use crate::preprocess::MaskedSample;

pub const MIN_STEPS: usize = 8;

/// Where the straight-line path starts. Special positions keep their own
/// embedding in both cases, so they always score 0. The zero path begins
/// where layer norm is singular, so its Riemann sums converge slowly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    ZeroEmbedding,
    #[default]
    PadEmbedding,
}

/// How `top_k_tokens` orders scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    Magnitude,
    Signed,
}

/// Scalar function of the input embeddings with a gradient.
pub trait Attributable {
    fn embed(&self, seq: &TokenSequence) -> Result<Array2<f64>>;
    fn value(&self, seq: &TokenSequence, emb: &Array2<f64>) -> Result<f64>;
    fn value_and_grad(&self, seq: &TokenSequence, emb: &Array2<f64>) -> Result<(f64, Array2<f64>)>;
    fn ranking(&self) -> Ranking;
}

/// Probability of `class` under a guilt classifier.
pub struct ClassProbability<'a> {
    pub model: &'a GuiltClassifier,
    pub class: Role,
}

impl ClassProbability<'_> {
    fn sign(&self) -> f64 {
        if self.class == Role::Principal {
            1.0
        } else {
            -1.0
        }
    }

    fn of(&self, p: f64) -> f64 {
        if self.class == Role::Principal {
            p
        } else {
            1.0 - p
        }
    }
}

impl Attributable for ClassProbability<'_> {
    fn embed(&self, seq: &TokenSequence) -> Result<Array2<f64>> {
        self.model.encoder.embed_tokens(seq)
    }

    fn value(&self, seq: &TokenSequence, emb: &Array2<f64>) -> Result<f64> {
        Ok(self.of(sigmoid(self.model.forward_embeddings(emb, &key_mask(seq), None).0)))
    }

    fn value_and_grad(&self, seq: &TokenSequence, emb: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        let (logit, cache) = self.model.forward_embeddings(emb, &key_mask(seq), None);
        let p = sigmoid(logit);
        let mut scratch = zeros_like(self.model);
        let grad = self.model.backward_logit(&cache, self.sign() * p * (1.0 - p), &mut scratch);
        Ok((self.of(p), grad))
    }

    fn ranking(&self) -> Ranking {
        Ranking::Signed
    }
}

/// Unclamped months from a sentencing regressor at a fixed guilt value.
pub struct Months<'a> {
    pub model: &'a SentencingRegressor,
    pub guilt_value: f64,
}

impl Attributable for Months<'_> {
    fn embed(&self, seq: &TokenSequence) -> Result<Array2<f64>> {
        self.model.encoder.embed_tokens(seq)
    }

    fn value(&self, seq: &TokenSequence, emb: &Array2<f64>) -> Result<f64> {
        Ok(self.model.prison_max * self.model.forward_embeddings(emb, &key_mask(seq), self.guilt_value, None).0)
    }

    fn value_and_grad(&self, seq: &TokenSequence, emb: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        let (y, cache) = self.model.forward_embeddings(emb, &key_mask(seq), self.guilt_value, None);
        let mut scratch = zeros_like(self.model);
        let grad = self.model.backward_output(&cache, self.model.prison_max, &mut scratch);
        Ok((self.model.prison_max * y, grad))
    }

    fn ranking(&self) -> Ranking {
        Ranking::Magnitude
    }
}

/// Linear read-out `w · cls + b` over any encoder backend.
pub struct LinearProbe<'a, B: EncoderBackend> {
    pub backend: &'a B,
    pub weights: Array1<f64>,
    pub bias: f64,
}

impl<B: EncoderBackend> Attributable for LinearProbe<'_, B> {
    fn embed(&self, seq: &TokenSequence) -> Result<Array2<f64>> {
        self.backend.embed_tokens(seq)
    }

    fn value(&self, seq: &TokenSequence, emb: &Array2<f64>) -> Result<f64> {
        Ok(self.weights.dot(&self.backend.cls_from_embeddings(seq, emb)?) + self.bias)
    }

    fn value_and_grad(&self, seq: &TokenSequence, emb: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        let v = self.value(seq, emb)?;
        Ok((v, self.backend.cls_input_gradient(seq, emb, &self.weights.view())?))
    }

    fn ranking(&self) -> Ranking {
        Ranking::Magnitude
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAttribution {
    pub case_id: String,
    pub defendant: String,
    pub tokens: Vec<String>,
    pub special: Vec<bool>,
    pub scores: Vec<f64>,
    pub prediction: f64,
    pub baseline_prediction: f64,
    pub steps: usize,
    /// `|Σ scores − (prediction − baseline_prediction)|`
    pub residual: f64,
    pub ranking: Ranking,
}

impl TokenAttribution {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Residual relative to the prediction change.
    pub fn relative_residual(&self) -> f64 {
        self.residual / (self.prediction - self.baseline_prediction).abs()
    }
}

pub fn baseline_embeddings<M: Attributable + ?Sized>(
    model: &M,
    seq: &TokenSequence,
    baseline: Baseline,
) -> Result<Array2<f64>> {
    match baseline {
        Baseline::PadEmbedding => {
            let mut padded = seq.clone();
            for (id, &special) in padded.ids.iter_mut().zip(&seq.special_mask) {
                if !special {
                    *id = PAD_ID;
                }
            }
            model.embed(&padded)
        }
        Baseline::ZeroEmbedding => {
            let mut x = model.embed(seq)?;
            for (mut row, &special) in x.axis_iter_mut(Axis(0)).zip(&seq.special_mask) {
                if !special {
                    row.fill(0.0);
                }
            }
            Ok(x)
        }
    }
}

/// Midpoint-rule integrated gradients from an explicit baseline.
pub fn integrated_gradients_from<M: Attributable + ?Sized>(
    model: &M,
    seq: &TokenSequence,
    baseline: &Array2<f64>,
    steps: usize,
) -> Result<TokenAttribution> {
    if steps < MIN_STEPS {
        return Err(Error::InvalidArgument(format!("integrated gradients needs at least {MIN_STEPS} steps, got {steps}")));
    }
    let x = model.embed(seq)?;
    if baseline.dim() != x.dim() {
        return Err(Error::InvalidArgument(format!("baseline shape {:?} differs from input {:?}", baseline.dim(), x.dim())));
    }
    let delta = &x - baseline;
    let mut avg = Array2::<f64>::zeros(x.raw_dim());
    for m in 0..steps {
        let a = (m as f64 + 0.5) / steps as f64;
        let point = baseline + &(&delta * a);
        let (_, g) = model.value_and_grad(seq, &point)?;
        avg += &g;
    }
    avg /= steps as f64;
    let scores: Vec<f64> = (&delta * &avg).sum_axis(Axis(1)).to_vec();
    let prediction = model.value(seq, &x)?;
    let baseline_prediction = model.value(seq, baseline)?;
    let residual = (scores.iter().sum::<f64>() - (prediction - baseline_prediction)).abs();
    Ok(TokenAttribution {
        case_id: String::new(),
        defendant: String::new(),
        tokens: seq.surface.clone(),
        special: seq.special_mask.clone(),
        scores,
        prediction,
        baseline_prediction,
        steps,
        residual,
        ranking: model.ranking(),
    })
}

pub fn integrated_gradients<M: Attributable + ?Sized>(
    model: &M,
    seq: &TokenSequence,
    steps: usize,
    baseline: Baseline,
) -> Result<TokenAttribution> {
    integrated_gradients_from(model, seq, &baseline_embeddings(model, seq, baseline)?, steps)
}

/// Attribution for a sample, tagged with its case and defendant.
pub fn attribute_sample<M: Attributable + ?Sized>(
    model: &M,
    sample: &MaskedSample,
    steps: usize,
    baseline: Baseline,
) -> Result<TokenAttribution> {
    let mut a = integrated_gradients(model, &sample.tokens, steps, baseline)?;
    a.case_id = sample.case_id.clone();
    a.defendant = sample.target_name.clone();
    Ok(a)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopK {
    pub indices: Vec<usize>,
    /// Set when fewer than `k` tokens were eligible.
    pub truncated: bool,
}

pub fn top_k_tokens(attr: &TokenAttribution, k: usize, exempt_specials: bool) -> Result<TopK> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let key = |s: f64| match attr.ranking {
        Ranking::Magnitude => s.abs(),
        Ranking::Signed => s,
    };
    let mut idx: Vec<usize> = (0..attr.len()).filter(|&i| !(exempt_specials && attr.special[i])).collect();
    // stable sort keeps the lower index first among equal keys
    idx.sort_by(|&a, &b| key(attr.scores[b]).total_cmp(&key(attr.scores[a])));
    let truncated = idx.len() < k;
    idx.truncate(k);
    Ok(TopK { indices: idx, truncated })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompReport {
    pub k: usize,
    pub comp_metric: BTreeMap<String, f64>,
    pub comp_p: Option<f64>,
    pub n_samples: usize,
    /// Samples that had fewer than `k` removable tokens.
    pub n_truncated: usize,
    pub removal: String,
}

const REMOVAL: &str = "token ids deleted, sequence closed up, specials kept";

/// Model and task for a comprehensiveness run.
#[derive(Clone, Copy)]
pub enum CompModel<'a> {
    Classifier(&'a GuiltClassifier),
    /// `guilt_values[i]` is broadcast for sample `i`.
    Regressor { model: &'a SentencingRegressor, guilt_values: &'a [f64] },
}

impl CompModel<'_> {
    fn check(&self, samples: &[MaskedSample]) -> Result<()> {
        if let CompModel::Regressor { guilt_values, .. } = self {
            if guilt_values.len() != samples.len() {
                return Err(Error::Shape { expected: samples.len(), actual: guilt_values.len() });
            }
        }
        Ok(())
    }

    /// Attribution target for sample `i`: the predicted class, or months.
    pub fn attribute(&self, samples: &[MaskedSample], i: usize, steps: usize, baseline: Baseline) -> Result<TokenAttribution> {
        self.check(samples)?;
        let s = &samples[i];
        match *self {
            CompModel::Classifier(model) => {
                let class = model.predict_tokens(&s.tokens)?.label;
                attribute_sample(&ClassProbability { model, class }, s, steps, baseline)
            }
            CompModel::Regressor { model, guilt_values } => {
                attribute_sample(&Months { model, guilt_value: guilt_values[i] }, s, steps, baseline)
            }
        }
    }

    pub fn attribute_all(&self, samples: &[MaskedSample], steps: usize, baseline: Baseline) -> Result<Vec<TokenAttribution>> {
        (0..samples.len()).map(|i| self.attribute(samples, i, steps, baseline)).collect()
    }
}

/// Metrics over `seqs`, plus the mean ground-truth class probability.
fn score_sequences(model: CompModel, samples: &[MaskedSample], seqs: &[TokenSequence]) -> Result<(BTreeMap<String, f64>, Option<f64>)> {
    let mut out = BTreeMap::new();
    match model {
        CompModel::Classifier(m) => {
            let mut preds = Vec::with_capacity(seqs.len());
            let mut p_true = 0.0;
            for (s, seq) in samples.iter().zip(seqs) {
                let g = m.predict_tokens(seq)?;
                preds.push(g.label.label());
                p_true += if s.guilt == Role::Principal { g.p } else { 1.0 - g.p };
            }
            let labels: Vec<u8> = samples.iter().map(|s| s.guilt.label()).collect();
            let c = classification_metrics(&preds, &labels)?;
            out.insert(metrics::ACC.into(), c.acc);
            out.insert(metrics::F1.into(), c.f1);
            Ok((out, Some(p_true / seqs.len().max(1) as f64)))
        }
        CompModel::Regressor { model, guilt_values } => {
            let preds =
                seqs.iter().zip(guilt_values).map(|(seq, &g)| Ok(model.months_for_tokens(seq, g)?.1)).collect::<Result<Vec<_>>>()?;
            let truths: Vec<f64> = samples.iter().map(|s| s.months()).collect();
            let r = regression_metrics(&preds, &truths, model.prison_max)?;
            out.insert(metrics::IMP_SCORE.into(), r.imp_score);
            out.insert(metrics::IMP_ACC.into(), r.imp_acc);
            out.insert(metrics::IMP_ERR.into(), r.imp_err);
            Ok((out, None))
        }
    }
}

/// `M(x) − M(x̃)` after deleting each sample's top-`k` tokens, reusing
/// precomputed attributions. `k = 0` gives all zeros and ignores `attrs`.
pub fn comprehensiveness_from(
    model: CompModel,
    samples: &[MaskedSample],
    attrs: &[TokenAttribution],
    k: usize,
) -> Result<CompReport> {
    model.check(samples)?;
    if k > 0 && attrs.len() != samples.len() {
        return Err(Error::Shape { expected: samples.len(), actual: attrs.len() });
    }
    let (full, p_full) = score_sequences(model, samples, &samples.iter().map(|s| s.tokens.clone()).collect::<Vec<_>>())?;
    let mut n_truncated = 0;
    let (reduced, p_reduced) = if k == 0 {
        (full.clone(), p_full)
    } else {
        let mut seqs = Vec::with_capacity(samples.len());
        for (s, a) in samples.iter().zip(attrs) {
            if a.tokens != s.tokens.surface {
                return Err(Error::Validation(format!("attribution for {}/{} does not match its sample", s.case_id, s.target_name)));
            }
            let top = top_k_tokens(a, k, true)?;
            n_truncated += usize::from(top.truncated);
            seqs.push(s.tokens.without(&top.indices));
        }
        score_sequences(model, samples, &seqs)?
    };
    let comp_metric = full.iter().map(|(name, v)| (name.clone(), v - reduced[name])).collect();
    Ok(CompReport {
        k,
        comp_metric,
        comp_p: p_full.zip(p_reduced).map(|(a, b)| a - b),
        n_samples: samples.len(),
        n_truncated,
        removal: REMOVAL.into(),
    })
}

pub fn comprehensiveness(
    model: CompModel,
    samples: &[MaskedSample],
    k: usize,
    steps: usize,
    baseline: Baseline,
) -> Result<CompReport> {
    let attrs = if k == 0 { Vec::new() } else { model.attribute_all(samples, steps, baseline)? };
    comprehensiveness_from(model, samples, &attrs, k)
}

/// Surface-token counts over every attribution's top-`k`, most frequent
/// first, ties alphabetical.
pub fn aggregate_token_frequencies(attrs: &[TokenAttribution], k: usize) -> Result<Vec<(String, usize)>> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in attrs {
        for i in top_k_tokens(a, k, true)?.indices {
            *counts.entry(a.tokens[i].as_str()).or_default() += 1;
        }
    }
    let mut table: Vec<(String, usize)> = counts.into_iter().map(|(t, c)| (t.to_string(), c)).collect();
    table.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeight {
    pub position: usize,
    pub token: String,
    pub weight: f64,
}

/// Head-averaged class-summary attention row of `layer`, divided by its max.
pub fn export_attention(output: &EncoderOutput, seq: &TokenSequence, layer: usize) -> Result<Vec<AttentionWeight>> {
    let heads = output
        .attention
        .get(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} out of range (encoder has {})", output.attention.len())))?;
    if heads.is_empty() || heads[0].ncols() != seq.len() {
        return Err(Error::Shape { expected: seq.len(), actual: heads.first().map_or(0, |h| h.ncols()) });
    }
    let mut row = Array1::<f64>::zeros(seq.len());
    for h in heads {
        row += &h.row(0);
    }
    let max = row.fold(0.0f64, |m, &v| m.max(v));
    Ok(row
        .iter()
        .enumerate()
        .map(|(i, &w)| AttentionWeight { position: i, token: seq.surface[i].clone(), weight: w / max })
        .collect())
}

#[derive(Serialize)]
struct AttributionLine<'a> {
    case_id: &'a str,
    defendant: &'a str,
    token: &'a str,
    score: f64,
}

/// One JSON line per token.
pub fn write_attributions<W: Write>(attrs: &[TokenAttribution], mut w: W) -> Result<()> {
    for a in attrs {
        for (token, &score) in a.tokens.iter().zip(&a.scores) {
            serde_json::to_writer(&mut w, &AttributionLine { case_id: &a.case_id, defendant: &a.defendant, token, score })?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_attention<W: Write>(weights: &[AttentionWeight], mut w: W) -> Result<()> {
    for a in weights {
        serde_json::to_writer(&mut w, a)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Tab-separated `token count` lines with a header.
pub fn write_frequencies<W: Write>(table: &[(String, usize)], mut w: W) -> Result<()> {
    writeln!(w, "token\tcount")?;
    for (t, c) in table {
        writeln!(w, "{t}\t{c}")?;
    }
    w.flush()?;
    Ok(())
}
