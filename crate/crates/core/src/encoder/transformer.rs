//! Pre-LayerNorm bidirectional transformer encoder.
//!
//! ```text
//! x0 = tok_emb[ids] + pos_emb[0..n]            (embed_tokens)
//! x  = x + Dropout(MHA(LN1(x)))                 per layer
//! x  = x + Dropout(W2 · GELU(W1 · LN2(x)))
//! hidden = LN_final(x); cls = hidden[0]
//! ```
//!
//! Pad positions are excluded as attention keys.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::nn::{
    dropout_mask, gelu, gelu_grad, normal_matrix, slice2, slice2_mut, softmax_rows, LayerNorm, Linear, LnCache,
    Params,
};
use super::tokenizer::{TokenSequence, PAD_ID};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Hidden size.
    pub d: usize,
    /// Feed-forward inner size.
    pub ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { layers: 2, heads: 4, d: 128, ff: 256, max_len: 512, dropout: 0.1, vocab_size: 0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d == 0 || self.ff == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!("hidden size {} is not divisible by {} heads", self.d, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config("vocab_size must cover the special tokens".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout on, masks drawn from the given seed.
    Train { seed: u64 },
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// Final-layer states, `seq_len × d`.
    pub hidden: Array2<f64>,
    /// State at position 0.
    pub cls: Array1<f64>,
    /// `attention[layer][head]` is a `seq_len × seq_len` row-stochastic matrix.
    pub attention: Vec<Vec<Array2<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Params for EncoderLayer {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = self.ln1.params();
        v.extend(self.qkv.params());
        v.extend(self.out.params());
        v.extend(self.ln2.params());
        v.extend(self.ff1.params());
        v.extend(self.ff2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.ln1.params_mut();
        v.extend(self.qkv.params_mut());
        v.extend(self.out.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.ff1.params_mut());
        v.extend(self.ff2.params_mut());
        v
    }
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    ln2: LnCache,
    b: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    drop_ff: Option<Array2<f64>>,
}

/// Activations kept from a forward pass for [`Encoder::backward`].
pub struct EncoderCache {
    emb_drop: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
}

impl Params for Encoder {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = vec![slice2(&self.tok_emb), slice2(&self.pos_emb)];
        for l in &self.layers {
            v.extend(l.params());
        }
        v.extend(self.final_ln.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![slice2_mut(&mut self.tok_emb), slice2_mut(&mut self.pos_emb)];
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        v.extend(self.final_ln.params_mut());
        v
    }
}

fn sinusoid(max_len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((max_len, d), |(pos, i)| {
        let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Encoder> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let d = config.d;
        let layers = (0..config.layers)
            .map(|_| {
                let mut out = Linear::new(d, d, &mut rng);
                let mut ff2 = Linear::new(config.ff, d, &mut rng);
                // shrink residual branches so the stack starts near identity
                let depth = (2.0 * config.layers as f64).sqrt();
                out.w /= depth;
                ff2.w /= depth;
                EncoderLayer {
                    ln1: LayerNorm::new(d),
                    qkv: Linear::new(d, 3 * d, &mut rng),
                    out,
                    ln2: LayerNorm::new(d),
                    ff1: Linear::new(d, config.ff, &mut rng),
                    ff2,
                }
            })
            .collect();
        Ok(Encoder {
            tok_emb: normal_matrix(config.vocab_size, d, 1.0, &mut rng),
            pos_emb: sinusoid(config.max_len, d),
            layers,
            final_ln: LayerNorm::new(d),
            config,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.config.d
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        seq.check(self.config.max_len)?;
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Token plus position embeddings, `seq_len × d`.
    pub fn embed_tokens(&self, seq: &TokenSequence) -> Result<Array2<f64>> {
        self.check(seq)?;
        let mut x = Array2::zeros((seq.len(), self.config.d));
        for (i, (mut row, &id)) in x.rows_mut().into_iter().zip(&seq.ids).enumerate() {
            row.assign(&self.tok_emb.row(id as usize));
            row += &self.pos_emb.row(i);
        }
        Ok(x)
    }

    /// Scatters an input-embedding gradient into token and position tables.
    pub fn accumulate_embedding_grad(&self, seq: &TokenSequence, d_emb: &Array2<f64>, g: &mut Encoder) {
        for (i, (row, &id)) in d_emb.rows().into_iter().zip(&seq.ids).enumerate() {
            let mut t = g.tok_emb.row_mut(id as usize);
            t += &row;
            let mut p = g.pos_emb.row_mut(i);
            p += &row;
        }
    }

    pub fn encode(&self, seq: &TokenSequence, mode: Mode) -> Result<EncoderOutput> {
        let emb = self.embed_tokens(seq)?;
        let mut rng = match mode {
            Mode::Train { seed } => Some(seed::rng(seed)),
            Mode::Eval => None,
        };
        let (out, _) = self.forward(&emb, &key_mask(seq), rng.as_mut());
        Ok(out)
    }

    /// Runs the stack on precomputed input embeddings. `keys[j]` is false
    /// for positions that must not be attended to.
    pub fn forward(&self, emb: &Array2<f64>, keys: &[bool], mut rng: Option<&mut Rng>) -> (EncoderOutput, EncoderCache) {
        let cfg = &self.config;
        let n = emb.nrows();
        let p = cfg.dropout;
        let draw = |rng: &mut Option<&mut Rng>, shape| match rng {
            Some(r) if p > 0.0 => Some(dropout_mask(shape, p, r)),
            _ => None,
        };
        let emb_drop = draw(&mut rng, (n, cfg.d));
        let mut x = match &emb_drop {
            Some(m) => emb * m,
            None => emb.clone(),
        };

        let dh = cfg.d / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, ln1) = layer.ln1.forward(&x.view());
            let qkv = layer.qkv.forward(&a.view());
            let mut ctx = Array2::zeros((n, cfg.d));
            let mut probs = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![.., cfg.d + h * dh..cfg.d + (h + 1) * dh]);
                let v = qkv.slice(s![.., 2 * cfg.d + h * dh..2 * cfg.d + (h + 1) * dh]);
                let mut sc = q.dot(&k.t());
                sc *= scale;
                for (j, &keep) in keys.iter().enumerate() {
                    if !keep {
                        sc.column_mut(j).fill(f64::NEG_INFINITY);
                    }
                }
                softmax_rows(&mut sc);
                ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&sc.dot(&v));
                probs.push(sc);
            }
            let mut o = layer.out.forward(&ctx.view());
            let drop_attn = draw(&mut rng, (n, cfg.d));
            if let Some(m) = &drop_attn {
                o *= m;
            }
            let x_mid = &x + &o;
            let (b, ln2) = layer.ln2.forward(&x_mid.view());
            let pre = layer.ff1.forward(&b.view());
            let act = pre.mapv(gelu);
            let mut f = layer.ff2.forward(&act.view());
            let drop_ff = draw(&mut rng, (n, cfg.d));
            if let Some(m) = &drop_ff {
                f *= m;
            }
            x = &x_mid + &f;
            attention.push(probs.clone());
            caches.push(LayerCache {
                ln1,
                a,
                qkv,
                probs,
                ctx,
                drop_attn,
                ln2,
                b,
                pre,
                act,
                drop_ff,
            });
        }
        let (hidden, final_ln) = self.final_ln.forward(&x.view());
        let cls = hidden.row(0).to_owned();
        (
            EncoderOutput { hidden, cls, attention },
            EncoderCache { emb_drop, layers: caches, final_ln },
        )
    }

    /// Backpropagates `d_hidden` (and optionally a gradient on the last
    /// layer's attention probabilities, indexed `[head]`) through the stack.
    /// Parameter gradients accumulate into `g`; the input-embedding
    /// gradient is returned.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        d_hidden: &ArrayView2<f64>,
        d_last_attention: Option<&[Array2<f64>]>,
        g: &mut Encoder,
    ) -> Array2<f64> {
        let cfg = &self.config;
        let dh = cfg.d / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_layers = self.layers.len();
        let mut dx = self.final_ln.backward(&cache.final_ln, d_hidden, &mut g.final_ln);
        for (li, (layer, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let gl = &mut g.layers[li];
            // feed-forward branch
            let mut df = dx.clone();
            if let Some(m) = &c.drop_ff {
                df *= m;
            }
            let mut dact = layer.ff2.backward(&c.act.view(), &df.view(), &mut gl.ff2);
            ndarray::Zip::from(&mut dact).and(&c.pre).for_each(|d, &z| *d *= gelu_grad(z));
            let db = layer.ff1.backward(&c.b.view(), &dact.view(), &mut gl.ff1);
            let dmid = layer.ln2.backward(&c.ln2, &db.view(), &mut gl.ln2);
            let mut dx_mid = dx;
            dx_mid += &dmid;

            // attention branch
            let mut do_ = dx_mid.clone();
            if let Some(m) = &c.drop_attn {
                do_ *= m;
            }
            let dctx = layer.out.backward(&c.ctx.view(), &do_.view(), &mut gl.out);
            let n = dctx.nrows();
            let mut dqkv = Array2::zeros((n, 3 * cfg.d));
            for h in 0..cfg.heads {
                let cols = h * dh..(h + 1) * dh;
                let q = c.qkv.slice(s![.., cols.clone()]);
                let k = c.qkv.slice(s![.., cfg.d + h * dh..cfg.d + (h + 1) * dh]);
                let v = c.qkv.slice(s![.., 2 * cfg.d + h * dh..2 * cfg.d + (h + 1) * dh]);
                let p = &c.probs[h];
                let dctx_h = dctx.slice(s![.., cols.clone()]);
                let mut dp = dctx_h.dot(&v.t());
                if li + 1 == n_layers {
                    if let Some(extra) = d_last_attention {
                        dp += &extra[h];
                    }
                }
                let dv = p.t().dot(&dctx_h);
                let row_dot = (&dp * p).sum_axis(Axis(1));
                let mut ds = dp;
                ds -= &row_dot.insert_axis(Axis(1));
                ds *= p;
                ds *= scale;
                dqkv.slice_mut(s![.., cols]).assign(&ds.dot(&k));
                dqkv.slice_mut(s![.., cfg.d + h * dh..cfg.d + (h + 1) * dh]).assign(&ds.t().dot(&q));
                dqkv.slice_mut(s![.., 2 * cfg.d + h * dh..2 * cfg.d + (h + 1) * dh]).assign(&dv);
            }
            let da = layer.qkv.backward(&c.a.view(), &dqkv.view(), &mut gl.qkv);
            let dln1 = layer.ln1.backward(&c.ln1, &da.view(), &mut gl.ln1);
            dx = dx_mid;
            dx += &dln1;
        }
        if let Some(m) = &cache.emb_drop {
            dx *= m;
        }
        dx
    }
}

/// Attention key mask for a sequence: pad positions are excluded.
pub fn key_mask(seq: &TokenSequence) -> Vec<bool> {
    seq.ids.iter().map(|&id| id != PAD_ID).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::nn::zeros_like;
    use crate::encoder::tokenizer::Tokenizer;

    fn setup(dropout: f64) -> (Tokenizer, Encoder) {
        let tok = Tokenizer::build(["Zhang stabbed the victim while Wang held the victim down ."], 1);
        let cfg = EncoderConfig { layers: 2, heads: 2, d: 8, ff: 12, max_len: 32, dropout, vocab_size: tok.vocab_size() };
        (tok.clone(), Encoder::new(cfg, 11).unwrap())
    }

    #[test]
    fn attention_rows_are_stochastic_and_eval_is_deterministic() {
        let (tok, enc) = setup(0.1);
        let seq = tok.tokenize("[MASK] stabbed the victim while Wang held the victim down .", 32);
        let a = enc.encode(&seq, Mode::Eval).unwrap();
        let b = enc.encode(&seq, Mode::Eval).unwrap();
        assert_eq!(a.cls, b.cls);
        assert_eq!(a.hidden.dim(), (seq.len(), 8));
        for layer in &a.attention {
            assert_eq!(layer.len(), 2);
            for head in layer {
                for row in head.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-5);
                }
            }
        }
        let t1 = enc.encode(&seq, Mode::Train { seed: 1 }).unwrap();
        let t2 = enc.encode(&seq, Mode::Train { seed: 2 }).unwrap();
        assert_ne!(t1.cls, t2.cls);
    }

    #[test]
    fn pads_do_not_change_cls() {
        let (tok, enc) = setup(0.0);
        let seq = tok.tokenize("Zhang stabbed the victim", 32);
        let a = enc.encode(&seq, Mode::Eval).unwrap();
        let b = enc.encode(&seq.padded(5), Mode::Eval).unwrap();
        for (x, y) in a.cls.iter().zip(&b.cls) {
            assert!((x - y).abs() < 1e-12);
        }
        for head in &b.attention[1] {
            for j in seq.len()..seq.len() + 5 {
                assert_eq!(head[[0, j]], 0.0);
            }
        }
    }

    #[test]
    fn swapping_tokens_changes_states() {
        let (tok, enc) = setup(0.0);
        let a = enc.encode(&tok.tokenize("Zhang stabbed Wang", 32), Mode::Eval).unwrap();
        let b = enc.encode(&tok.tokenize("Wang stabbed Zhang", 32), Mode::Eval).unwrap();
        assert!((&a.cls - &b.cls).mapv(f64::abs).sum() > 1e-6);
    }

    #[test]
    fn embedding_shapes() {
        let (tok, enc) = setup(0.0);
        let seq = tok.tokenize("", 32);
        assert_eq!(enc.embed_tokens(&seq).unwrap().dim(), (2, 8));
        let padded = tok.tokenize("Zhang", 32).padded(3);
        let e = enc.embed_tokens(&padded).unwrap();
        // identical token rows differ only by position embedding
        let d1 = &e.row(3) - &enc.pos_emb.row(3);
        let d2 = &e.row(5) - &enc.pos_emb.row(5);
        assert!((&d1 - &d2).iter().all(|v| v.abs() < 1e-12));
        assert!(enc.encode(&tok.tokenize("Zhang", 32).padded(40), Mode::Eval).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig { d: 10, heads: 4, vocab_size: 20, ..EncoderConfig::default() };
        assert!(Encoder::new(bad, 0).is_err());
        let bad = EncoderConfig { dropout: 1.0, vocab_size: 20, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
    }

    /// Central differences on a scalar loss of cls and one attention row.
    #[test]
    fn backward_matches_finite_differences() {
        let (tok, enc) = setup(0.0);
        let seq = tok.tokenize("[MASK] stabbed the victim while Wang held", 32);
        let emb = enc.embed_tokens(&seq).unwrap();
        let keys = key_mask(&seq);
        let n = seq.len();
        let w_cls = Array1::from_shape_fn(8, |i| (i as f64 * 0.7).sin());
        let w_att = Array1::from_shape_fn(n, |j| (j as f64 * 1.3).cos());
        let loss = |e: &Array2<f64>| {
            let (o, _) = enc.forward(e, &keys, None);
            o.cls.dot(&w_cls) + o.attention[1][1].row(0).dot(&w_att)
        };
        let (_, cache) = enc.forward(&emb, &keys, None);
        let mut d_hidden = Array2::zeros((n, 8));
        d_hidden.row_mut(0).assign(&w_cls);
        let mut d_att = vec![Array2::zeros((n, n)); 2];
        d_att[1].row_mut(0).assign(&w_att);
        let mut g = zeros_like(&enc);
        let d_emb = enc.backward(&cache, &d_hidden.view(), Some(&d_att), &mut g);

        let h = 1e-6;
        for i in 0..emb.len() {
            let mut p = emb.clone();
            let mut m = emb.clone();
            p.as_slice_mut().unwrap()[i] += h;
            m.as_slice_mut().unwrap()[i] -= h;
            let num = (loss(&p) - loss(&m)) / (2.0 * h);
            let ana = d_emb.as_slice().unwrap()[i];
            assert!((num - ana).abs() <= 1e-6 * (1.0 + num.abs()), "coord {i}: {num} vs {ana}");
        }
        // parameter gradients on a handful of weights
        let base = enc.clone();
        let probe = |get: &dyn Fn(&mut Encoder) -> &mut f64, ana: f64| {
            let mut p = base.clone();
            *get(&mut p) += h;
            let mut m = base.clone();
            *get(&mut m) -= h;
            let lp = { let (o, _) = p.forward(&emb, &keys, None); o.cls.dot(&w_cls) + o.attention[1][1].row(0).dot(&w_att) };
            let lm = { let (o, _) = m.forward(&emb, &keys, None); o.cls.dot(&w_cls) + o.attention[1][1].row(0).dot(&w_att) };
            let num = (lp - lm) / (2.0 * h);
            assert!((num - ana).abs() <= 1e-6 * (1.0 + num.abs()), "{num} vs {ana}");
        };
        probe(&|e| &mut e.layers[0].qkv.w[[2, 5]], g.layers[0].qkv.w[[2, 5]]);
        probe(&|e| &mut e.layers[1].qkv.w[[3, 20]], g.layers[1].qkv.w[[3, 20]]);
        probe(&|e| &mut e.layers[1].ff1.b[4], g.layers[1].ff1.b[4]);
        probe(&|e| &mut e.layers[0].ln2.gamma[1], g.layers[0].ln2.gamma[1]);
        probe(&|e| &mut e.final_ln.beta[7], g.final_ln.beta[7]);
    }
}
