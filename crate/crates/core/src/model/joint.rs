//! Two-encoder multi-task model.
//!
//! ```text
//! fd   → encoder_fd  → cls → fd_head → softmax q ∈ Δ² → projection → v ∈ R^d
//! cv_d → encoder_cvd → H, A (last layer) → s = Σ_j w_j H_j,  w = mean_h A_h[0, ·]
//! fused = s + v → cls_head → logits (index 1 = principal)
//!               → reg_head → r,  months = prison_max · r
//! ```

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{cross_entropy, GuiltPrediction};
use crate::corpus::Role;
use crate::encoder::nn::{softmax, softmax_backward, Linear, Params};
use crate::encoder::{key_mask, Encoder, EncoderCache, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::preprocess::{MaskedSample, TextSource};
use crate::seed;

/// How the court-view summary is read from attention; recorded in run
/// metadata.
pub const ATTENTION_READING: &str =
    "summary = sum_j w_j * hidden_j with w = head-averaged final-layer attention row of the class-summary token";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    /// Classification weight.
    pub alpha: f64,
    /// Regression weight.
    pub beta: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig { alpha: 1.0, beta: 0.1 }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0, got ({}, {})", self.alpha, self.beta)));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("alpha and beta cannot both be zero".into()));
        }
        Ok(())
    }

    /// The 17 (α, β) points of the weighting sweep, from (0, 1) to (1, 0).
    pub fn sweep_grid() -> Vec<JointConfig> {
        const SIDE: [f64; 9] = [0.0, 0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0];
        let rising = SIDE.iter().map(|&alpha| JointConfig { alpha, beta: 1.0 });
        let falling = SIDE.iter().rev().skip(1).map(|&beta| JointConfig { alpha: 1.0, beta });
        rising.chain(falling).collect()
    }
}

/// `α · CE(logits, role) + β · (months − true_months)²`.
pub fn joint_loss(logits: &ArrayView1<f64>, months: f64, role: Role, true_months: f64, cfg: &JointConfig) -> Result<f64> {
    cfg.validate()?;
    if logits.len() != 2 {
        return Err(Error::Shape { expected: 2, actual: logits.len() });
    }
    Ok(cfg.alpha * cross_entropy(logits, role) + cfg.beta * (months - true_months).powi(2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointOutput {
    pub logits: Array1<f64>,
    pub guilt: GuiltPrediction,
    pub raw_months: f64,
    pub months: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModel {
    pub fd_encoder: Encoder,
    pub cvd_encoder: Encoder,
    pub fd_head: Linear,
    pub projection: Linear,
    pub cls_head: Linear,
    pub reg_head: Linear,
    pub prison_max: f64,
}

impl Params for JointModel {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = self.fd_encoder.params();
        v.extend(self.cvd_encoder.params());
        for l in [&self.fd_head, &self.projection, &self.cls_head, &self.reg_head] {
            v.extend(l.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.fd_encoder.params_mut();
        v.extend(self.cvd_encoder.params_mut());
        for l in [&mut self.fd_head, &mut self.projection, &mut self.cls_head, &mut self.reg_head] {
            v.extend(l.params_mut());
        }
        v
    }
}

struct Forward {
    fd_out: EncoderOutput,
    fd_cache: EncoderCache,
    q: Array1<f64>,
    cvd_out: EncoderOutput,
    cvd_cache: EncoderCache,
    w: Array1<f64>,
    fused: Array1<f64>,
    logits: Array1<f64>,
    r: f64,
}

impl JointModel {
    /// Both task heads start at zero.
    pub fn new(config: EncoderConfig, prison_max: f64, seed: u64) -> Result<JointModel> {
        if !(prison_max > 0.0) {
            return Err(Error::InvalidArgument(format!("prison_max must be positive, got {prison_max}")));
        }
        let d = config.d;
        let mut rng = seed::rng(seed::derive(seed, "joint-heads", 0));
        Ok(JointModel {
            fd_encoder: Encoder::new(config.clone(), seed::derive(seed, "joint-fd", 0))?,
            cvd_encoder: Encoder::new(config, seed::derive(seed, "joint-cvd", 0))?,
            fd_head: Linear::new(d, 2, &mut rng),
            projection: Linear::new(2, d, &mut rng),
            cls_head: Linear::zeros(d, 2),
            reg_head: Linear::zeros(d, 1),
            prison_max,
        })
    }

    fn check(fd: &MaskedSample, cvd: &MaskedSample) -> Result<()> {
        if !fd.same_defendant(cvd) {
            return Err(Error::InvalidArgument(format!(
                "joint inputs target different defendants: {}/{} vs {}/{}",
                fd.case_id, fd.target_name, cvd.case_id, cvd.target_name
            )));
        }
        if fd.source != TextSource::Fd || cvd.source != TextSource::CvD {
            return Err(Error::Config(format!("joint model expects (fd, cv_d) samples, got ({}, {})", fd.source, cvd.source)));
        }
        Ok(())
    }

    fn run(&self, fd: &MaskedSample, cvd: &MaskedSample, dropout_seed: Option<u64>) -> Result<Forward> {
        Self::check(fd, cvd)?;
        let mut rng_fd = dropout_seed.map(|s| seed::rng(seed::derive(s, "fd", 0)));
        let mut rng_cvd = dropout_seed.map(|s| seed::rng(seed::derive(s, "cvd", 0)));
        let e_fd = self.fd_encoder.embed_tokens(&fd.tokens)?;
        let (fd_out, fd_cache) = self.fd_encoder.forward(&e_fd, &key_mask(&fd.tokens), rng_fd.as_mut());
        let q = softmax(&self.fd_head.forward_vec(&fd_out.cls.view()).view());
        let v = self.projection.forward_vec(&q.view());

        let e_cvd = self.cvd_encoder.embed_tokens(&cvd.tokens)?;
        let (cvd_out, cvd_cache) = self.cvd_encoder.forward(&e_cvd, &key_mask(&cvd.tokens), rng_cvd.as_mut());
        let last = cvd_out.attention.last().expect("at least one layer");
        let mut w = Array1::zeros(cvd_out.hidden.nrows());
        for head in last {
            w += &head.row(0);
        }
        w /= last.len() as f64;
        let s = cvd_out.hidden.t().dot(&w);
        let fused = s + v;
        let logits = self.cls_head.forward_vec(&fused.view());
        let r = self.reg_head.forward_vec(&fused.view())[0];
        Ok(Forward { fd_out, fd_cache, q, cvd_out, cvd_cache, w, fused, logits, r })
    }

    fn output(&self, f: &Forward) -> JointOutput {
        let p = softmax(&f.logits.view())[1];
        let label = if f.logits[1] >= f.logits[0] { Role::Principal } else { Role::Accomplice };
        let raw = self.prison_max * f.r;
        JointOutput {
            logits: f.logits.clone(),
            guilt: GuiltPrediction { p, label },
            raw_months: raw,
            months: raw.clamp(0.0, self.prison_max),
        }
    }

    /// Eval-mode forward pass.
    pub fn joint_forward(&self, fd: &MaskedSample, cvd: &MaskedSample) -> Result<JointOutput> {
        Ok(self.output(&self.run(fd, cvd, None)?))
    }

    /// One training example with the regression term on the
    /// `months / prison_max` scale. Adds `weight · ∂loss/∂θ` into `g` and
    /// returns the loss.
    pub fn accumulate(
        &self,
        fd: &MaskedSample,
        cvd: &MaskedSample,
        cfg: &JointConfig,
        dropout_seed: Option<u64>,
        weight: f64,
        g: &mut JointModel,
    ) -> Result<f64> {
        let f = self.run(fd, cvd, dropout_seed)?;
        let target = cvd.months() / self.prison_max;
        let loss = joint_loss(&f.logits.view(), f.r, cvd.guilt, target, cfg)?;

        let mut d_logits = softmax(&f.logits.view());
        d_logits[usize::from(cvd.guilt.label())] -= 1.0;
        d_logits *= weight * cfg.alpha;
        let d_r = weight * cfg.beta * 2.0 * (f.r - target);
        let mut d_fused = self.cls_head.backward_vec(&f.fused.view(), &d_logits.view(), &mut g.cls_head);
        d_fused += &self.reg_head.backward_vec(&f.fused.view(), &ndarray::array![d_r].view(), &mut g.reg_head);

        // fd branch through the projection and the softmax
        let dq = self.projection.backward_vec(&f.q.view(), &d_fused.view(), &mut g.projection);
        let dz = softmax_backward(&f.q.view(), &dq.view());
        let d_cls_fd = self.fd_head.backward_vec(&f.fd_out.cls.view(), &dz.view(), &mut g.fd_head);
        let mut dh_fd = Array2::zeros(f.fd_out.hidden.raw_dim());
        dh_fd.row_mut(0).assign(&d_cls_fd);
        let de = self.fd_encoder.backward(&f.fd_cache, &dh_fd.view(), None, &mut g.fd_encoder);
        self.fd_encoder.accumulate_embedding_grad(&fd.tokens, &de, &mut g.fd_encoder);

        // cv_d branch: s = Hᵀw, w = mean over heads of A_h[0, ·]
        let hidden = &f.cvd_out.hidden;
        let n = hidden.nrows();
        let mut dh_cvd = Array2::zeros((n, hidden.ncols()));
        for (j, mut row) in dh_cvd.rows_mut().into_iter().enumerate() {
            row.scaled_add(f.w[j], &d_fused);
        }
        let heads = f.cvd_out.attention.last().map_or(1, Vec::len);
        let dw = hidden.dot(&d_fused) / heads as f64;
        let mut d_att = vec![Array2::zeros((n, n)); heads];
        for a in &mut d_att {
            a.row_mut(0).assign(&dw);
        }
        let de = self.cvd_encoder.backward(&f.cvd_cache, &dh_cvd.view(), Some(&d_att), &mut g.cvd_encoder);
        self.cvd_encoder.accumulate_embedding_grad(&cvd.tokens, &de, &mut g.cvd_encoder);
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;
    use crate::encoder::nn::zeros_like;
    use crate::encoder::Tokenizer;
    use crate::preprocess::Strategy;

    fn sample(tok: &Tokenizer, text: &str, source: TextSource) -> MaskedSample {
        MaskedSample {
            case_id: "c".into(),
            target_name: "Zhang".into(),
            strategy: Strategy::Mask,
            source,
            tokens: tok.tokenize(text, 32),
            label: Label::Months(30.0),
            guilt: Role::Accomplice,
            prison_months: 30,
        }
    }

    fn setup() -> (JointModel, MaskedSample, MaskedSample) {
        let fd = "[MASK] held the victim while Wang stabbed him.";
        let cvd = "[MASK] and Wang injured the victim. [MASK] surrendered.";
        let tok = Tokenizer::build([fd, cvd], 1);
        let cfg = EncoderConfig { layers: 1, heads: 2, d: 8, ff: 8, max_len: 32, dropout: 0.0, vocab_size: tok.vocab_size() };
        let mut m = JointModel::new(cfg, 180.0, 4).unwrap();
        m.cls_head.w.iter_mut().enumerate().for_each(|(i, w)| *w = 0.02 * i as f64 - 0.1);
        m.reg_head.w.iter_mut().enumerate().for_each(|(i, w)| *w = 0.1 - 0.03 * i as f64);
        (m, sample(&tok, fd, TextSource::Fd), sample(&tok, cvd, TextSource::CvD))
    }

    #[test]
    fn loss_limits_and_linearity() {
        let logits = ndarray::array![0.3, -0.7];
        let (m, y) = (0.4, 0.25);
        let ce = joint_loss(&logits.view(), m, Role::Principal, y, &JointConfig { alpha: 1.0, beta: 0.0 }).unwrap();
        let se = joint_loss(&logits.view(), m, Role::Principal, y, &JointConfig { alpha: 0.0, beta: 1.0 }).unwrap();
        assert!((se - (m - y).powi(2)).abs() < 1e-15);
        assert!((ce - cross_entropy(&logits.view(), Role::Principal)).abs() < 1e-15);
        let mixed = joint_loss(&logits.view(), m, Role::Principal, y, &JointConfig { alpha: 0.3, beta: 2.0 }).unwrap();
        assert!((mixed - (0.3 * ce + 2.0 * se)).abs() < 1e-12);
        assert!(joint_loss(&logits.view(), m, Role::Principal, y, &JointConfig { alpha: 0.0, beta: 0.0 }).is_err());
    }

    #[test]
    fn grid_has_seventeen_points() {
        let g = JointConfig::sweep_grid();
        assert_eq!(g.len(), 17);
        assert_eq!(g[0], JointConfig { alpha: 0.0, beta: 1.0 });
        assert_eq!(g[16], JointConfig { alpha: 1.0, beta: 0.0 });
        assert!(g.iter().all(|c| c.validate().is_ok()));
    }

    #[test]
    fn shapes_and_zero_projection() {
        let (mut m, fd, cvd) = setup();
        let out = m.joint_forward(&fd, &cvd).unwrap();
        assert_eq!(out.logits.len(), 2);
        assert!(out.raw_months.is_finite());
        m.projection = Linear::zeros(2, 8);
        let a = m.joint_forward(&fd, &cvd).unwrap();
        m.fd_head.w.mapv_inplace(|x| -3.0 * x + 1.0);
        let b = m.joint_forward(&fd, &cvd).unwrap();
        assert_eq!(a.raw_months, b.raw_months);

        let mut other = cvd.clone();
        other.target_name = "Wang".into();
        assert!(m.joint_forward(&fd, &other).is_err());
    }

    #[test]
    fn untrained_heads() {
        let (mut m, fd, cvd) = setup();
        m.cls_head = Linear::zeros(8, 2);
        m.reg_head = Linear::zeros(8, 1);
        let out = m.joint_forward(&fd, &cvd).unwrap();
        assert_eq!(out.guilt.p, 0.5);
        assert_eq!(out.guilt.label, Role::Principal);
        assert_eq!(out.months, 0.0);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let (m, fd, cvd) = setup();
        let cfg = JointConfig { alpha: 0.7, beta: 3.0 };
        let mut g = zeros_like(&m);
        m.accumulate(&fd, &cvd, &cfg, None, 1.0, &mut g).unwrap();
        let loss = |m: &JointModel| m.accumulate(&fd, &cvd, &cfg, None, 1.0, &mut zeros_like(m)).unwrap();
        let h = 1e-6;
        let n = m.params().len();
        let n_enc = m.fd_encoder.params().len();
        let probes = [(0, 60), (3, 5), (n_enc, 70), (n_enc + 3, 6), (n_enc + 4, 5), (n - 8, 3), (n - 6, 1), (n - 4, 9), (n - 2, 4)];
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
