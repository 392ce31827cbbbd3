use crate::error::{Error, Result};
use crate::netcore::ParamTree;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates shaped like the parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: T,
    pub v: T,
    pub step: u64,
}

impl<T: ParamTree> AdamState<T> {
    pub fn new(params: &T) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// Learning-rate multiplier decaying linearly from 1 at step 0 to 0 at
/// `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub total_steps: u64,
}

impl LinearSchedule {
    pub fn factor(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        (1.0 - step as f64 / self.total_steps as f64).max(0.0)
    }
}

/// One bias-corrected Adam update with the learning rate scaled by
/// `lr_factor`.
pub fn adam_step<T: ParamTree>(
    params: &mut T,
    grads: &T,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr_factor: f64,
) -> Result<()> {
    for (t, name) in grads.tensors().iter().zip(grads.names()) {
        if t.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let lr = cfg.lr * lr_factor;
    let g_all = grads.tensors();
    let m_all = state.m.tensors_mut();
    let v_all = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(g_all).zip(m_all).zip(v_all) {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array1};

    use super::*;
    use crate::netcore::LayerNormParams;

    fn scalar(x: f64) -> LayerNormParams {
        LayerNormParams { gain: array![x], bias: Array1::zeros(1) }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(1.5);
        let g = scalar(0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 1.0).unwrap();
        assert_eq!(p.gain[0], 1.5);
    }

    #[test]
    fn two_scalar_steps_match_reference() {
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar(0.5), &mut st, &cfg, 1.0).unwrap();
        adam_step(&mut p, &scalar(-0.2), &mut st, &cfg, 0.5).unwrap();

        // by hand
        let mut x: f64 = 1.0;
        let (m1, v1) = (0.1 * 0.5, 0.001 * 0.25);
        x -= 0.1 * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
        let m2 = 0.9 * m1 + 0.1 * -0.2;
        let v2 = 0.999 * v1 + 0.001 * 0.04;
        let c1 = 1.0 - 0.81;
        let c2 = 1.0 - 0.999f64 * 0.999;
        x -= 0.05 * (m2 / c1) / ((v2 / c2).sqrt() + 1e-8);
        assert!((p.gain[0] - x).abs() < 1e-15);
    }

    #[test]
    fn schedule_end_means_no_update() {
        let s = LinearSchedule { total_steps: 10 };
        assert_eq!(s.factor(0), 1.0);
        assert_eq!(s.factor(10), 0.0);
        assert!((s.factor(5) - 0.5).abs() < 1e-15);
        let mut p = scalar(2.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar(3.0), &mut st, &AdamConfig::default(), s.factor(10)).unwrap();
        assert_eq!(p.gain[0], 2.0);
    }

    #[test]
    fn rejects_nan() {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p);
        let r = adam_step(&mut p, &scalar(f64::NAN), &mut st, &AdamConfig::default(), 1.0);
        assert!(matches!(r, Err(Error::NonFiniteGradient(_))));
        assert_eq!(p.gain[0], 1.0);
    }
}
