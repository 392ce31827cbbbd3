use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::netcore::params::{sl1, sl1m, sl2, sl2m};
use crate::netcore::ParamTree;

/// Sparse encoder input: (feature index, value) pairs.
pub type SparseInput = Vec<(usize, f64)>;

/// Two softplus layers followed by linear heads for the posterior mean and
/// log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w_mu: Array2<f64>,
    pub b_mu: Array1<f64>,
    pub w_lv: Array2<f64>,
    pub b_lv: Array1<f64>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) struct EncoderCache {
    pre1: Array1<f64>,
    h1: Array1<f64>,
    pre2: Array1<f64>,
    h2: Array1<f64>,
}

impl EncoderParams {
    pub fn init(input_dim: usize, hidden: usize, n_topics: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: xavier(rng, input_dim, hidden),
            b1: Array1::zeros(hidden),
            w2: xavier(rng, hidden, hidden),
            b2: Array1::zeros(hidden),
            w_mu: xavier(rng, hidden, n_topics),
            b_mu: Array1::zeros(n_topics),
            w_lv: xavier(rng, hidden, n_topics),
            b_lv: Array1::zeros(n_topics),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_topics(&self) -> usize {
        self.w_mu.ncols()
    }

    /// Posterior mean only.
    pub fn mean(&self, x: &[(usize, f64)]) -> Array1<f64> {
        self.forward(x).0
    }

    /// Posterior mean and log-variance.
    pub(crate) fn forward(&self, x: &[(usize, f64)]) -> (Array1<f64>, Array1<f64>, EncoderCache) {
        let mut pre1 = self.b1.clone();
        for &(i, v) in x {
            pre1.scaled_add(v, &self.w1.row(i));
        }
        let h1 = pre1.mapv(softplus);
        let pre2 = h1.dot(&self.w2) + &self.b2;
        let h2 = pre2.mapv(softplus);
        let mu = h2.dot(&self.w_mu) + &self.b_mu;
        let lv = h2.dot(&self.w_lv) + &self.b_lv;
        (mu, lv, EncoderCache { pre1, h1, pre2, h2 })
    }

    /// Accumulates parameter gradients for upstream `d_mu`, `d_lv`.
    pub(crate) fn backward(
        &self,
        x: &[(usize, f64)],
        cache: &EncoderCache,
        d_mu: &Array1<f64>,
        d_lv: &Array1<f64>,
        grad: &mut EncoderParams,
    ) {
        let outer = |a: &Array1<f64>, b: &Array1<f64>| {
            a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
        };
        grad.w_mu += &outer(&cache.h2, d_mu);
        grad.b_mu += d_mu;
        grad.w_lv += &outer(&cache.h2, d_lv);
        grad.b_lv += d_lv;
        let d_h2 = self.w_mu.dot(d_mu) + self.w_lv.dot(d_lv);
        let d_pre2 = &d_h2 * &cache.pre2.mapv(sigmoid);
        grad.w2 += &outer(&cache.h1, &d_pre2);
        grad.b2 += &d_pre2;
        let d_h1 = self.w2.dot(&d_pre2);
        let d_pre1 = &d_h1 * &cache.pre1.mapv(sigmoid);
        for &(i, v) in x {
            let mut row = grad.w1.row_mut(i);
            row.scaled_add(v, &d_pre1);
        }
        grad.b1 += &d_pre1;
    }
}

impl ParamTree for EncoderParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            sl2(&self.w1),
            sl1(&self.b1),
            sl2(&self.w2),
            sl1(&self.b2),
            sl2(&self.w_mu),
            sl1(&self.b_mu),
            sl2(&self.w_lv),
            sl1(&self.b_lv),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let EncoderParams { w1, b1, w2, b2, w_mu, b_mu, w_lv, b_lv } = self;
        vec![sl2m(w1), sl1m(b1), sl2m(w2), sl1m(b2), sl2m(w_mu), sl1m(b_mu), sl2m(w_lv), sl1m(b_lv)]
    }

    fn names(&self) -> Vec<String> {
        ["w1", "b1", "w2", "b2", "w_mu", "b_mu", "w_lv", "b_lv"].map(String::from).to_vec()
    }
}
