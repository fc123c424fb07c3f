use ndarray::{array, Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{broadcast_value, GuiltPrediction};
use crate::corpus::Role;
use crate::encoder::nn::{Linear, Params};
use crate::encoder::{key_mask, Encoder, EncoderCache, EncoderConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::preprocess::{MaskedSample, TextSource};
use crate::seed;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Court-view text only.
    None,
    /// Guilt broadcast onto the class-summary state.
    #[default]
    Broadcast,
}

/// What gets broadcast when fusion is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BroadcastValue {
    /// Hard label in {0, 1}.
    Label,
    /// Stage-1 probability of principal.
    Probability,
}

/// Encoder plus a `d → 1` head. The head's output is in units of
/// `prison_max`, so `months = prison_max · (w·h + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencingRegressor {
    pub encoder: Encoder,
    pub head: Linear,
    pub prison_max: f64,
    pub fusion: Fusion,
    pub broadcast: BroadcastValue,
}

impl Params for SentencingRegressor {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.params();
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

pub(crate) struct RegressorCache {
    enc: EncoderCache,
    fused: Array1<f64>,
    n: usize,
}

impl SentencingRegressor {
    pub fn new(config: EncoderConfig, prison_max: f64, fusion: Fusion, seed: u64) -> Result<SentencingRegressor> {
        if !(prison_max > 0.0) {
            return Err(Error::InvalidArgument(format!("prison_max must be positive, got {prison_max}")));
        }
        let d = config.d;
        Ok(SentencingRegressor {
            encoder: Encoder::new(config, seed)?,
            head: Linear::zeros(d, 1),
            prison_max,
            fusion,
            broadcast: BroadcastValue::Label,
        })
    }

    /// Value added to the class-summary state for a Stage-1 output.
    pub fn guilt_value(&self, guilt: &GuiltPrediction) -> f64 {
        match self.broadcast {
            BroadcastValue::Label => f64::from(guilt.label.label()),
            BroadcastValue::Probability => guilt.p,
        }
    }

    pub fn clamp(&self, raw: f64) -> f64 {
        raw.clamp(0.0, self.prison_max)
    }

    /// Head output in `prison_max` units.
    pub(crate) fn forward_embeddings(
        &self,
        emb: &Array2<f64>,
        keys: &[bool],
        guilt_value: f64,
        dropout_seed: Option<u64>,
    ) -> (f64, RegressorCache) {
        let mut rng = dropout_seed.map(seed::rng);
        let (out, enc) = self.encoder.forward(emb, keys, rng.as_mut());
        let fused = match self.fusion {
            Fusion::None => out.cls,
            Fusion::Broadcast => {
                broadcast_value(&out.cls.view(), guilt_value, self.encoder.hidden_size()).expect("cls has width d").h_fused
            }
        };
        let y = self.head.forward_vec(&fused.view())[0];
        (y, RegressorCache { enc, fused, n: emb.nrows() })
    }

    pub(crate) fn backward_output(&self, cache: &RegressorCache, d_y: f64, g: &mut SentencingRegressor) -> Array2<f64> {
        // the broadcast term is constant in θ, so ∂fused/∂cls = I
        let dcls = self.head.backward_vec(&cache.fused.view(), &array![d_y].view(), &mut g.head);
        let mut d_hidden = Array2::zeros((cache.n, self.encoder.hidden_size()));
        d_hidden.row_mut(0).assign(&dcls);
        self.encoder.backward(&cache.enc, &d_hidden.view(), None, &mut g.encoder)
    }

    /// `(raw, clamped)` months in eval mode.
    pub fn months_for_tokens(&self, seq: &TokenSequence, guilt_value: f64) -> Result<(f64, f64)> {
        let emb = self.encoder.embed_tokens(seq)?;
        let (y, _) = self.forward_embeddings(&emb, &key_mask(seq), guilt_value, None);
        let raw = self.prison_max * y;
        Ok((raw, self.clamp(raw)))
    }

    fn check_source(&self, sample: &MaskedSample) -> Result<()> {
        if sample.source != TextSource::CvD {
            return Err(Error::Config(format!(
                "sentencing regressor expects cv_d samples, got {} for {}/{}",
                sample.source, sample.case_id, sample.target_name
            )));
        }
        Ok(())
    }

    /// Reported (clamped) months for a pruned-court-view sample.
    pub fn predict_prison(&self, sample: &MaskedSample, guilt_label: Role) -> Result<f64> {
        self.check_source(sample)?;
        Ok(self.months_for_tokens(&sample.tokens, f64::from(guilt_label.label()))?.1)
    }

    /// One training example against `months / prison_max`; adds
    /// `weight · ∂/∂θ` of the squared error into `g` and returns it.
    pub fn accumulate(
        &self,
        sample: &MaskedSample,
        guilt_value: f64,
        dropout_seed: Option<u64>,
        weight: f64,
        g: &mut Self,
    ) -> Result<f64> {
        self.check_source(sample)?;
        let seq = &sample.tokens;
        let emb = self.encoder.embed_tokens(seq)?;
        let (y, cache) = self.forward_embeddings(&emb, &key_mask(seq), guilt_value, dropout_seed);
        let r = y - sample.months() / self.prison_max;
        let d_emb = self.backward_output(&cache, weight * 2.0 * r, g);
        self.encoder.accumulate_embedding_grad(seq, &d_emb, &mut g.encoder);
        Ok(r * r)
    }
}
