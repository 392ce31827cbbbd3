use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{AdapterParams, LayerNormParams};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

/// Row-wise layer normalization with learned gain and bias.
pub(crate) fn layer_norm(x: ArrayView2<f64>, p: &LayerNormParams) -> (Array2<f64>, LnCache) {
    let (rows, h) = x.dim();
    let mut xhat = Array2::zeros((rows, h));
    let mut rstd = Array1::zeros(rows);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        Zip::from(xhat.row_mut(i)).and(row).for_each(|o, &v| *o = (v - mean) * r);
    }
    let y = &xhat * &p.gain + &p.bias;
    (y, LnCache { xhat, rstd })
}

/// Returns dx and accumulates into `grad` when given.
pub(crate) fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &LnCache,
    p: &LayerNormParams,
    grad: Option<&mut LayerNormParams>,
) -> Array2<f64> {
    let h = dy.ncols() as f64;
    if let Some(g) = grad {
        g.gain += &(&dy * &cache.xhat).sum_axis(Axis(0));
        g.bias += &dy.sum_axis(Axis(0));
    }
    let dxhat = &dy * &p.gain;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let dxh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_d = dxh.sum() / h;
        let mean_dx = dxh.dot(&xh) / h;
        let r = cache.rstd[i];
        Zip::from(dx.row_mut(i))
            .and(dxh)
            .and(xh)
            .for_each(|o, &d, &x| *o = r * (d - mean_d - x * mean_dx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) struct AdapterCache {
    ln: LnCache,
    normed: Array2<f64>,
    pre_relu: Array2<f64>,
    hidden: Array2<f64>,
}

/// Bottleneck branch `ReLU(LN(H) W_hd) W_dh` without the residual.
pub(crate) fn adapter_delta(h: ArrayView2<f64>, p: &AdapterParams) -> (Array2<f64>, AdapterCache) {
    let (normed, ln) = layer_norm(h, &p.ln);
    let pre_relu = normed.dot(&p.w_hd);
    let hidden = pre_relu.mapv(|v| v.max(0.0));
    let delta = hidden.dot(&p.w_dh);
    (delta, AdapterCache { ln, normed, pre_relu, hidden })
}

/// Backward through the bottleneck branch; returns the gradient reaching
/// the adapter input through the branch (the residual path is handled by
/// the caller).
pub(crate) fn adapter_delta_backward(
    d_delta: ArrayView2<f64>,
    cache: &AdapterCache,
    p: &AdapterParams,
    mut grad: Option<&mut AdapterParams>,
) -> Array2<f64> {
    if let Some(g) = grad.as_deref_mut() {
        g.w_dh += &cache.hidden.t().dot(&d_delta);
    }
    let mut d_pre = d_delta.dot(&p.w_dh.t());
    Zip::from(&mut d_pre).and(&cache.pre_relu).for_each(|d, &u| {
        if u <= 0.0 {
            *d = 0.0;
        }
    });
    if let Some(g) = grad.as_deref_mut() {
        g.w_hd += &cache.normed.t().dot(&d_pre);
    }
    let d_normed = d_pre.dot(&p.w_hd.t());
    layer_norm_backward(d_normed.view(), &cache.ln, &p.ln, grad.map(|g| &mut g.ln))
}

/// Numerically stable log-softmax of one row.
pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let p = LayerNormParams::new(4);
        let x = array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 0.0, 1.0]];
        let (y, _) = layer_norm(x.view(), &p);
        for row in y.outer_iter() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn log_softmax_two_way() {
        let ls = log_softmax(&[1.0, 0.0]);
        assert!((-ls[0] - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
    }
}
