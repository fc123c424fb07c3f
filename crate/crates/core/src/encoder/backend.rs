//! Encoder contract for pluggable backends.

use ndarray::{Array1, Array2, ArrayView1};

use super::{key_mask, Encoder, EncoderOutput, Mode, TokenSequence, Tokenizer};
use crate::error::{Error, Result};

/// What downstream code needs from an encoder. Backends that cannot
/// differentiate keep the default gradient methods, which fail.
pub trait EncoderBackend {
    fn hidden_size(&self) -> usize;
    fn max_len(&self) -> usize;
    fn tokenize(&self, text: &str) -> TokenSequence;
    fn encode(&self, seq: &TokenSequence, mode: Mode) -> Result<EncoderOutput>;
    fn embed_tokens(&self, seq: &TokenSequence) -> Result<Array2<f64>>;

    /// Eval-mode class-summary state from precomputed input embeddings.
    fn cls_from_embeddings(&self, _seq: &TokenSequence, _emb: &Array2<f64>) -> Result<Array1<f64>> {
        Err(Error::InvalidArgument("encoder backend is not differentiable".into()))
    }

    /// `∂(d_cls · cls)/∂ input embeddings`, evaluated at `emb`.
    fn cls_input_gradient(
        &self,
        _seq: &TokenSequence,
        _emb: &Array2<f64>,
        _d_cls: &ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        Err(Error::InvalidArgument("encoder backend is not differentiable".into()))
    }
}

/// The built-in encoder paired with its vocabulary.
#[derive(Debug, Clone)]
pub struct DeskBackend<'a> {
    pub tokenizer: &'a Tokenizer,
    pub encoder: &'a Encoder,
}

impl EncoderBackend for DeskBackend<'_> {
    fn hidden_size(&self) -> usize {
        self.encoder.hidden_size()
    }

    fn max_len(&self) -> usize {
        self.encoder.config.max_len
    }

    fn tokenize(&self, text: &str) -> TokenSequence {
        self.tokenizer.tokenize(text, self.max_len())
    }

    fn encode(&self, seq: &TokenSequence, mode: Mode) -> Result<EncoderOutput> {
        self.encoder.encode(seq, mode)
    }

    fn embed_tokens(&self, seq: &TokenSequence) -> Result<Array2<f64>> {
        self.encoder.embed_tokens(seq)
    }

    fn cls_from_embeddings(&self, seq: &TokenSequence, emb: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(self.encoder.forward(emb, &key_mask(seq), None).0.cls)
    }

    fn cls_input_gradient(&self, seq: &TokenSequence, emb: &Array2<f64>, d_cls: &ArrayView1<f64>) -> Result<Array2<f64>> {
        let (_, cache) = self.encoder.forward(emb, &key_mask(seq), None);
        let mut d_hidden = Array2::zeros(emb.raw_dim());
        d_hidden.row_mut(0).assign(d_cls);
        let mut scratch = crate::encoder::nn::zeros_like(self.encoder);
        Ok(self.encoder.backward(&cache, &d_hidden.view(), None, &mut scratch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    struct Frozen;

    impl EncoderBackend for Frozen {
        fn hidden_size(&self) -> usize {
            2
        }
        fn max_len(&self) -> usize {
            8
        }
        fn tokenize(&self, _text: &str) -> TokenSequence {
            Tokenizer::build([""], 1).tokenize("", 8)
        }
        fn encode(&self, _seq: &TokenSequence, _mode: Mode) -> Result<EncoderOutput> {
            Err(Error::InvalidArgument("frozen".into()))
        }
        fn embed_tokens(&self, seq: &TokenSequence) -> Result<Array2<f64>> {
            Ok(Array2::zeros((seq.len(), 2)))
        }
    }

    #[test]
    fn default_gradient_path_errors() {
        let b = Frozen;
        let seq = b.tokenize("x");
        let emb = b.embed_tokens(&seq).unwrap();
        assert!(b.cls_from_embeddings(&seq, &emb).is_err());
        assert!(b.cls_input_gradient(&seq, &emb, &Array1::zeros(2).view()).is_err());
    }

    #[test]
    fn desk_backend_matches_encoder() {
        let tok = Tokenizer::build(["Zhang hit Wang ."], 1);
        let cfg = EncoderConfig { layers: 1, heads: 2, d: 8, ff: 8, max_len: 16, dropout: 0.1, vocab_size: tok.vocab_size() };
        let enc = Encoder::new(cfg, 4).unwrap();
        let b = DeskBackend { tokenizer: &tok, encoder: &enc };
        let seq = b.tokenize("Zhang hit Wang .");
        let emb = b.embed_tokens(&seq).unwrap();
        assert_eq!(b.cls_from_embeddings(&seq, &emb).unwrap(), b.encode(&seq, Mode::Eval).unwrap().cls);
        let g = b.cls_input_gradient(&seq, &emb, &Array1::ones(8).view()).unwrap();
        assert_eq!(g.dim(), emb.dim());
    }
}
