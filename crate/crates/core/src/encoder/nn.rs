//! Dense building blocks with explicit backward passes.
//!
//! Gradients are accumulated into a structurally identical value (see
//! [`zeros_like`]), so a model and its gradient share one type.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;

/// Flat access to every trainable tensor, always in the same order.
pub trait Params {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// A copy of `model` with every parameter set to zero.
pub fn zeros_like<T: Params + Clone>(model: &T) -> T {
    let mut g = model.clone();
    for p in g.params_mut() {
        p.fill(0.0);
    }
    g
}

pub fn scale_params<T: Params>(model: &mut T, factor: f64) {
    for p in model.params_mut() {
        p.iter_mut().for_each(|v| *v *= factor);
    }
}

pub(crate) fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}

pub(crate) fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

pub(crate) fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}

pub(crate) fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

pub(crate) fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

/// `y = x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Linear {
        let std = (1.0 / input as f64).sqrt();
        Linear { w: normal_matrix(input, output, std, rng), b: Array1::zeros(output) }
    }

    pub fn zeros(input: usize, output: usize) -> Linear {
        Linear { w: Array2::zeros((input, output)), b: Array1::zeros(output) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    pub fn forward_vec(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    pub fn backward(&self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, g: &mut Linear) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut g.w);
        g.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    pub fn backward_vec(&self, x: &ArrayView1<f64>, dy: &ArrayView1<f64>, g: &mut Linear) -> Array1<f64> {
        Zip::from(g.w.rows_mut()).and(x).for_each(|mut row, &xi| row.scaled_add(xi, dy));
        g.b += dy;
        self.w.dot(dy)
    }
}

impl Params for Linear {
    fn params(&self) -> Vec<&[f64]> {
        vec![slice2(&self.w), slice1(&self.b)]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice2_mut(&mut self.w), slice1_mut(&mut self.b)]
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> LayerNorm {
        LayerNorm { gamma: Array1::ones(d), beta: Array1::zeros(d) }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.dot(&row) / d;
            *s = 1.0 / (var + LN_EPS).sqrt();
            row *= *s;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LnCache, dy: &ArrayView2<f64>, g: &mut LayerNorm) -> Array2<f64> {
        let d = dy.ncols() as f64;
        g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
        let mut dx = dy * &self.gamma;
        for ((mut row, xhat), &s) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
            let sum = row.sum();
            let dot = row.dot(&xhat);
            Zip::from(&mut row).and(&xhat).for_each(|v, &xh| {
                *v = s * (*v - sum / d - xh * dot / d);
            });
        }
        dx
    }
}

impl Params for LayerNorm {
    fn params(&self) -> Vec<&[f64]> {
        vec![slice1(&self.gamma), slice1(&self.beta)]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice1_mut(&mut self.gamma), slice1_mut(&mut self.beta)]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax in place. `-inf` entries get probability 0.
pub fn softmax_rows(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub fn softmax(v: &ArrayView1<f64>) -> Array1<f64> {
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = v.mapv(|x| (x - max).exp());
    let s = e.sum();
    e / s
}

/// Gradient of a softmax given its output `p` and upstream `dp`.
pub fn softmax_backward(p: &ArrayView1<f64>, dp: &ArrayView1<f64>) -> Array1<f64> {
    let dot = p.dot(dp);
    Zip::from(p).and(dp).map_collect(|&pi, &di| pi * (di - dot))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverted-dropout mask: entries are 0 or `1/(1-p)`.
pub fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::array;

    fn fd<F: Fn(&Array2<f64>) -> f64>(f: F, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            g.as_slice_mut().unwrap()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = seed::rng(3);
        let mut ln = LayerNorm::new(5);
        ln.gamma = array![1.0, 0.5, -2.0, 1.5, 0.3];
        ln.beta = array![0.1, 0.0, 0.2, -0.3, 0.0];
        let x = normal_matrix(3, 5, 1.0, &mut rng);
        let w = normal_matrix(3, 5, 1.0, &mut rng);
        let loss = |x: &Array2<f64>| (ln.forward(&x.view()).0 * &w).sum();
        let (_, cache) = ln.forward(&x.view());
        let mut g = zeros_like(&ln);
        let dx = ln.backward(&cache, &w.view(), &mut g);
        assert_close(&dx, &fd(loss, &x), 1e-7);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = seed::rng(4);
        let lin = Linear::new(4, 3, &mut rng);
        let x = normal_matrix(2, 4, 1.0, &mut rng);
        let w = normal_matrix(2, 3, 1.0, &mut rng);
        let mut g = zeros_like(&lin);
        let dx = lin.backward(&x.view(), &w.view(), &mut g);
        assert_close(&dx, &fd(|x| (lin.forward(&x.view()) * &w).sum(), &x), 1e-8);
        let gw = fd(
            |m| {
                let l = Linear { w: m.clone(), b: lin.b.clone() };
                (l.forward(&x.view()) * &w).sum()
            },
            &lin.w,
        );
        assert_close(&g.w, &gw, 1e-8);

        let mut gv = zeros_like(&lin);
        let dxv = lin.backward_vec(&x.row(0), &w.row(0), &mut gv);
        let mut g1 = zeros_like(&lin);
        let dx1 = lin.backward(&x.slice(ndarray::s![0..1, ..]), &w.slice(ndarray::s![0..1, ..]), &mut g1);
        assert_close(&dxv.insert_axis(Axis(0)), &dx1, 1e-12);
        assert_close(&gv.w, &g1.w, 1e-12);
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_masks_neg_infinity() {
        let mut a = array![[1.0, f64::NEG_INFINITY, 0.5], [0.0, 0.0, 0.0]];
        softmax_rows(&mut a);
        assert_eq!(a[[0, 1]], 0.0);
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((sigmoid(0.0) - 0.5).abs() == 0.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
