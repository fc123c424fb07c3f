use ndarray::{array, Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{GuiltPrediction, BCE_EPS};
use crate::encoder::nn::{sigmoid, Linear, Params};
use crate::encoder::{key_mask, Encoder, EncoderCache, EncoderConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::preprocess::{MaskedSample, TextSource};
use crate::seed;

/// Encoder plus a single `d → 1` logistic head over the class-summary state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuiltClassifier {
    pub encoder: Encoder,
    pub head: Linear,
    pub threshold: f64,
    /// The text field this model was trained on.
    pub source: TextSource,
}

impl Params for GuiltClassifier {
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

pub(crate) struct ClassifierCache {
    enc: EncoderCache,
    cls: Array1<f64>,
    n: usize,
}

impl GuiltClassifier {
    /// Zero-initialized head: every input starts at `p = 0.5`.
    pub fn new(config: EncoderConfig, source: TextSource, seed: u64) -> Result<GuiltClassifier> {
        let d = config.d;
        Ok(GuiltClassifier { encoder: Encoder::new(config, seed)?, head: Linear::zeros(d, 1), threshold: 0.5, source })
    }

    pub(crate) fn forward_embeddings(
        &self,
        emb: &Array2<f64>,
        keys: &[bool],
        dropout_seed: Option<u64>,
    ) -> (f64, ClassifierCache) {
        let mut rng = dropout_seed.map(seed::rng);
        let (out, enc) = self.encoder.forward(emb, keys, rng.as_mut());
        let logit = self.head.forward_vec(&out.cls.view())[0];
        (logit, ClassifierCache { enc, cls: out.cls, n: emb.nrows() })
    }

    /// Returns `∂/∂ input embeddings` and accumulates parameter gradients.
    pub(crate) fn backward_logit(&self, cache: &ClassifierCache, d_logit: f64, g: &mut GuiltClassifier) -> Array2<f64> {
        let dcls = self.head.backward_vec(&cache.cls.view(), &array![d_logit].view(), &mut g.head);
        let mut d_hidden = Array2::zeros((cache.n, self.encoder.hidden_size()));
        d_hidden.row_mut(0).assign(&dcls);
        self.encoder.backward(&cache.enc, &d_hidden.view(), None, &mut g.encoder)
    }

    pub fn probability(&self, seq: &TokenSequence) -> Result<f64> {
        let emb = self.encoder.embed_tokens(seq)?;
        Ok(sigmoid(self.forward_embeddings(&emb, &key_mask(seq), None).0))
    }

    pub fn predict_tokens(&self, seq: &TokenSequence) -> Result<GuiltPrediction> {
        Ok(GuiltPrediction::from_probability(self.probability(seq)?, self.threshold))
    }

    /// Eval-mode prediction; the sample must come from the trained text field.
    pub fn infer_guilt(&self, sample: &MaskedSample) -> Result<GuiltPrediction> {
        if sample.source != self.source {
            return Err(Error::Config(format!(
                "classifier expects {} samples, got a {} sample for {}/{}",
                self.source, sample.source, sample.case_id, sample.target_name
            )));
        }
        self.predict_tokens(&sample.tokens)
    }

    /// One training example: adds `weight · ∂bce/∂θ` into `g`, returns its
    /// log-loss.
    pub fn accumulate(&self, sample: &MaskedSample, dropout_seed: Option<u64>, weight: f64, g: &mut Self) -> Result<f64> {
        let seq = &sample.tokens;
        let emb = self.encoder.embed_tokens(seq)?;
        let (logit, cache) = self.forward_embeddings(&emb, &key_mask(seq), dropout_seed);
        let p = sigmoid(logit);
        let y = f64::from(sample.guilt.label());
        let d_emb = self.backward_logit(&cache, weight * (p - y), g);
        self.encoder.accumulate_embedding_grad(seq, &d_emb, &mut g.encoder);
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        Ok(-(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, Role};
    use crate::encoder::nn::zeros_like;
    use crate::encoder::Tokenizer;

    fn tiny(text: &str) -> (Tokenizer, EncoderConfig) {
        let tok = Tokenizer::build([text], 1);
        let cfg = EncoderConfig { layers: 1, heads: 2, d: 8, ff: 8, max_len: 32, dropout: 0.0, vocab_size: tok.vocab_size() };
        (tok, cfg)
    }

    fn sample(tok: &Tokenizer, text: &str, source: TextSource) -> MaskedSample {
        MaskedSample {
            case_id: "c".into(),
            target_name: "Zhang".into(),
            strategy: crate::preprocess::Strategy::Original,
            source,
            tokens: tok.tokenize(text, 32),
            label: Label::Role(Role::Principal),
            guilt: Role::Principal,
            prison_months: 10,
        }
    }

    #[test]
    fn untrained_head_gives_half_and_principal() {
        let text = "Zhang stabbed Wang with a knife.";
        let (tok, cfg) = tiny(text);
        let m = GuiltClassifier::new(cfg, TextSource::Fd, 1).unwrap();
        for t in [text, "Wang", ""] {
            let p = m.infer_guilt(&sample(&tok, t, TextSource::Fd)).unwrap();
            assert_eq!(p.p, 0.5);
            assert_eq!(p.label, Role::Principal);
        }
        assert!(matches!(m.infer_guilt(&sample(&tok, text, TextSource::Cv)), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_gradient_matches_finite_difference() {
        let text = "Zhang stabbed Wang with a knife.";
        let (tok, cfg) = tiny(text);
        let mut m = GuiltClassifier::new(cfg, TextSource::Fd, 3).unwrap();
        m.head.w.iter_mut().enumerate().for_each(|(i, w)| *w = 0.3 - 0.1 * i as f64);
        let s = sample(&tok, text, TextSource::Fd);
        let mut g = zeros_like(&m);
        m.accumulate(&s, None, 1.0, &mut g).unwrap();
        let loss = |m: &GuiltClassifier| {
            let mut scratch = zeros_like(m);
            m.accumulate(&s, None, 1.0, &mut scratch).unwrap()
        };
        let h = 1e-6;
        let probes: [(usize, usize); 4] = [(0, 5), (0, 60), (2, 7), (m.params().len() - 2, 3)];
        for (t, i) in probes {
            let ana = g.params()[t][i];
            let mut p = m.clone();
            p.params_mut()[t][i] += h;
            let mut q = m.clone();
            q.params_mut()[t][i] -= h;
            let num = (loss(&p) - loss(&q)) / (2.0 * h);
            assert!((num - ana).abs() <= 1e-6 * (1.0 + num.abs()), "tensor {t}[{i}]: {num} vs {ana}");
        }
    }
}
