//! Decoder-only transformer with per-layer knowledge-expert adapters.
//!
//! After every transformer block the hidden states `H` pass through the
//! experts' adapters `A_l(H) = ReLU(LN(H) W_hd) W_dh + H`, mixed by the
//! routing weights `w`:
//!
//! ```text
//! H' = sum_l w_l A_l(H) = H + sum_l w_l ReLU(LN_l(H) W_hd_l) W_dh_l
//! ```
//!
//! The right-hand form (one shared residual) is what the forward pass
//! computes. It makes a zero `W_dh` an exact identity and makes indicator
//! weights select exactly one expert's output.

mod checkpoint;
mod layers;
mod model;
pub(crate) mod params;

pub use checkpoint::{load_experts, load_model, save_experts, save_model, MODEL_FORMAT_VERSION};
pub use model::Trainable;
pub use params::{
    AdapterParams, Backbone, Block, Expert, Gradients, LayerNormParams, ModelState, ParamTree,
};

use ndarray::{Array1, Array2, ArrayView2};

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden size `h`.
    pub hidden: usize,
    /// Adapter bottleneck `d`.
    pub bottleneck: usize,
    /// Number of experts `L`.
    pub n_experts: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_type_ids: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            hidden: 128,
            bottleneck: 64,
            n_experts: 4,
            vocab_size: crate::corpus::DEFAULT_LM_VOCAB_CAP,
            max_seq_len: 256,
            n_type_ids: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.n_layers >= 1, "n_layers must be at least 1"),
            (self.n_heads >= 1, "n_heads must be at least 1"),
            (self.hidden >= 1 && self.hidden % self.n_heads.max(1) == 0, "hidden must be divisible by n_heads"),
            (self.bottleneck >= 1, "bottleneck must be at least 1"),
            (self.n_experts >= 1, "n_experts must be at least 1"),
            (self.vocab_size >= 1, "vocab_size must be at least 1"),
            (self.max_seq_len >= 1, "max_seq_len must be at least 1"),
            (self.n_type_ids >= 1, "n_type_ids must be at least 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::invalid(*msg)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    /// Mix every expert by the routing weights.
    Weighted,
    /// Use only the expert with the largest weight.
    OneHot,
    /// Skip the adapters entirely (backbone-only baseline).
    NoExpert,
}

impl std::str::FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(RoutingMode::Weighted),
            "one_hot" | "one-hot" => Ok(RoutingMode::OneHot),
            "no_expert" | "none" => Ok(RoutingMode::NoExpert),
            other => Err(Error::invalid(format!("unknown routing mode {other:?}"))),
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(w: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in w.iter().enumerate() {
        if x > w[best] {
            best = i;
        }
    }
    best
}

pub fn indicator(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// The weights actually applied per mode, or `None` when adapters are
/// bypassed.
pub fn effective_weights(w: &[f64], mode: RoutingMode, n_experts: usize) -> Result<Option<Vec<f64>>> {
    if mode == RoutingMode::NoExpert {
        return Ok(None);
    }
    if w.len() != n_experts {
        return Err(Error::dims(format!("{} routing weights for {n_experts} experts", w.len())));
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::invalid("routing weights must be finite and non-negative"));
    }
    Ok(Some(match mode {
        RoutingMode::Weighted => w.to_vec(),
        RoutingMode::OneHot => indicator(n_experts, argmax(w)),
        RoutingMode::NoExpert => unreachable!(),
    }))
}

fn check_width(h: ArrayView2<f64>, width: usize) -> Result<()> {
    if h.ncols() != width {
        return Err(Error::dims(format!("hidden states have {} columns, expected {width}", h.ncols())));
    }
    Ok(())
}

/// Applies one adapter layer: `ReLU(LN(H) W_hd) W_dh + H`.
pub fn adapter_apply(adapter: &AdapterParams, h: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_width(h, adapter.w_hd.nrows())?;
    let (delta, _) = layers::adapter_delta(h, adapter);
    Ok(delta + &h)
}

/// Weighted sum of expert outputs. Zero-weight experts are skipped, so an
/// indicator weight vector returns the selected output unchanged.
pub fn mix_experts(w: &[f64], outputs: &[Array2<f64>], mode: RoutingMode) -> Result<Array2<f64>> {
    if w.len() != outputs.len() {
        return Err(Error::dims(format!("{} weights for {} expert outputs", w.len(), outputs.len())));
    }
    let Some(first) = outputs.first() else {
        return Err(Error::invalid("no expert outputs"));
    };
    if outputs.iter().any(|o| o.dim() != first.dim()) {
        return Err(Error::dims("expert outputs differ in shape"));
    }
    let weights = match mode {
        RoutingMode::NoExpert => return Err(Error::invalid("no_expert mode has nothing to mix")),
        _ => effective_weights(w, mode, outputs.len())?.expect("mixing mode"),
    };
    let mut out = Array2::zeros(first.dim());
    for (o, &wl) in outputs.iter().zip(&weights) {
        if wl != 0.0 {
            out.scaled_add(wl, o);
        }
    }
    Ok(out)
}

/// Causal forward pass; returns `seq.len() x vocab` logits.
pub fn forward(model: &ModelState, seq: &TokenSeq, w: &[f64], mode: RoutingMode) -> Result<Array2<f64>> {
    let weights = effective_weights(w, mode, model.config.n_experts)?;
    model::forward_logits(model, seq, weights.as_deref())
}

/// Logits at the final position only; what greedy decoding needs.
pub fn next_token_logits(
    model: &ModelState,
    seq: &TokenSeq,
    w: &[f64],
    mode: RoutingMode,
) -> Result<Array1<f64>> {
    let weights = effective_weights(w, mode, model.config.n_experts)?;
    model::last_logits(model, seq, weights.as_deref())
}

/// Mean of `-log softmax(logits[t])[targets[t]]` over masked positions.
pub fn loss_nll(logits: &Array2<f64>, targets: &[u32], mask: &[bool]) -> Result<f64> {
    let (sum, count) = nll_sum(logits, targets, mask)?;
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Summed NLL and the number of masked positions.
pub fn nll_sum(logits: &Array2<f64>, targets: &[u32], mask: &[bool]) -> Result<(f64, usize)> {
    if targets.len() != logits.nrows() || mask.len() != logits.nrows() {
        return Err(Error::dims(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.nrows(),
            targets.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (t, row) in logits.outer_iter().enumerate() {
        if !mask[t] {
            continue;
        }
        let target = targets[t] as usize;
        if target >= row.len() {
            return Err(Error::invalid(format!("target id {target} outside vocabulary")));
        }
        let ls = layers::log_softmax(&row.to_vec());
        sum -= ls[target];
        count += 1;
    }
    Ok((sum, count))
}

/// One training example: input tokens, next-token targets with their mask,
/// and the routing weights for the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub seq: TokenSeq,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    pub weights: Vec<f64>,
}

impl TrainItem {
    pub fn from_sample(sample: &crate::dialogform::SerializedSample, weights: Vec<f64>) -> Self {
        let (targets, mask) = sample.next_token_targets();
        Self { seq: sample.input.clone(), targets, mask, weights }
    }

    pub fn masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Token-weighted mean NLL over a batch and its gradients. Frozen blocks
/// (per `trainable`) come back as `None`.
pub fn backward(
    model: &ModelState,
    batch: &[TrainItem],
    mode: RoutingMode,
    trainable: &Trainable,
) -> Result<(f64, Gradients)> {
    if trainable.experts.len() != model.experts.len() {
        return Err(Error::dims("trainable flags do not match the expert count"));
    }
    let total: usize = batch.iter().map(TrainItem::masked).sum();
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    let scale = 1.0 / total as f64;
    let mut grads = trainable.empty_gradients(model);
    let mut loss = 0.0;
    for item in batch {
        if item.targets.len() != item.seq.len() || item.mask.len() != item.seq.len() {
            return Err(Error::dims("targets/mask length differs from the sequence"));
        }
        let weights = effective_weights(&item.weights, mode, model.config.n_experts)?;
        let (logits, cache) = model::forward_with_cache(model, &item.seq, weights.as_deref())?;
        let (sum, d_logits) = model::nll_and_grad(&logits, &item.targets, &item.mask, scale)?;
        loss += sum;
        model::backward_from_logits(model, &item.seq, &cache, &d_logits, &mut grads);
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((loss, grads))
}

#[cfg(test)]
pub(crate) mod tests {
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            hidden: 8,
            bottleneck: 4,
            n_experts: 2,
            vocab_size: 11,
            max_seq_len: 6,
            n_type_ids: 2,
        }
    }

    pub(crate) fn random_model(cfg: ModelConfig, seed: u64) -> ModelState {
        let mut m = ModelState::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for e in &mut m.experts {
            e.randomize_up_projections(&mut rng, 0.2);
        }
        m
    }

    pub(crate) fn random_seq(rng: &mut impl Rng, len: usize, vocab: usize) -> TokenSeq {
        TokenSeq::new(
            (0..len).map(|_| rng.random_range(0..vocab as u32)).collect(),
            (0..len).map(|_| rng.random_range(0..2)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn adapter_with_zero_up_projection_is_identity() {
        let m = ModelState::init(tiny_config(), 1).unwrap();
        let h = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 * 0.1 - 1.0);
        let out = adapter_apply(&m.experts[0].layers[0], h.view()).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn adapter_matches_scalar_reference() {
        // h = 4, d = 2, one row; every step written out by hand.
        let p = AdapterParams {
            ln: LayerNormParams { gain: array![1.0, 2.0, 0.5, 1.0], bias: array![0.0, 0.1, -0.1, 0.0] },
            w_hd: array![[0.5, -1.0], [0.25, 0.5], [-0.5, 1.0], [1.0, 0.0]],
            w_dh: array![[1.0, 0.0, -1.0, 2.0], [0.5, 0.5, 0.5, 0.5]],
        };
        let x = [1.0, 2.0, 3.0, 6.0];
        let mean = (1.0 + 2.0 + 3.0 + 6.0) / 4.0;
        let var = x.iter().map(|v: &f64| (v - mean).powi(2)).sum::<f64>() / 4.0;
        let rstd = 1.0 / (var + 1e-5f64).sqrt();
        let gain = [1.0, 2.0, 0.5, 1.0];
        let bias = [0.0, 0.1, -0.1, 0.0];
        let ln: Vec<f64> = (0..4).map(|i| (x[i] - mean) * rstd * gain[i] + bias[i]).collect();
        let w_hd = [[0.5, -1.0], [0.25, 0.5], [-0.5, 1.0], [1.0, 0.0]];
        let w_dh = [[1.0, 0.0, -1.0, 2.0], [0.5, 0.5, 0.5, 0.5]];
        let mut hidden = [0.0; 2];
        for k in 0..2 {
            let mut acc = 0.0;
            for i in 0..4 {
                acc += ln[i] * w_hd[i][k];
            }
            hidden[k] = if acc > 0.0 { acc } else { 0.0 };
        }
        let expected: Vec<f64> =
            (0..4).map(|j| hidden[0] * w_dh[0][j] + hidden[1] * w_dh[1][j] + x[j]).collect();

        let out = adapter_apply(&p, array![[1.0, 2.0, 3.0, 6.0]].view()).unwrap();
        for j in 0..4 {
            assert!((out[[0, j]] - expected[j]).abs() < 1e-12, "col {j}");
        }
    }

    #[test]
    fn adapter_shape_and_dims() {
        let m = random_model(tiny_config(), 2);
        for j in [1, 3, 6] {
            let h = Array2::from_elem((j, 8), 0.3);
            assert_eq!(adapter_apply(&m.experts[0].layers[1], h.view()).unwrap().dim(), (j, 8));
        }
        let bad = Array2::zeros((2, 5));
        assert!(matches!(
            adapter_apply(&m.experts[0].layers[0], bad.view()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn mixing_rules() {
        let a = Array2::from_elem((2, 3), 1.5);
        let b = Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64);
        let c = Array2::from_elem((2, 3), -0.25);
        let outs = vec![a.clone(), b.clone(), c.clone()];
        assert_eq!(mix_experts(&[0.0, 1.0, 0.0], &outs, RoutingMode::Weighted).unwrap(), b);
        assert_eq!(mix_experts(&[0.2, 0.5, 0.3], &outs, RoutingMode::OneHot).unwrap(), b);

        let same = vec![b.clone(), b.clone(), b.clone()];
        let mixed = mix_experts(&[0.2, 0.5, 0.3], &same, RoutingMode::Weighted).unwrap();
        assert!(mixed.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));

        // shared residual identity: sum_l w_l (f_l + H) == H + sum_l w_l f_l
        let h = Array2::from_shape_fn((2, 3), |(i, j)| (i as f64) - 0.5 * j as f64);
        let fs = [a, b, c];
        let w = [0.1, 0.6, 0.3];
        let full: Vec<_> = fs.iter().map(|f| f + &h).collect();
        let lhs = mix_experts(&w, &full, RoutingMode::Weighted).unwrap();
        let mut rhs = h.clone();
        for (f, wl) in fs.iter().zip(w) {
            rhs.scaled_add(wl, f);
        }
        assert!(lhs.iter().zip(rhs.iter()).all(|(x, y)| (x - y).abs() < 1e-6));

        assert!(mix_experts(&[0.5, 0.5], &outs, RoutingMode::Weighted).is_err());
    }

    #[test]
    fn causal_masking() {
        let m = random_model(tiny_config(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = random_seq(&mut rng, 6, 11);
        let w = [0.4, 0.6];
        let base = forward(&m, &seq, &w, RoutingMode::Weighted).unwrap();
        for t in 0..5 {
            let mut changed = seq.clone();
            for p in t + 1..6 {
                changed.ids[p] = (changed.ids[p] + 1) % 11;
            }
            let out = forward(&m, &changed, &w, RoutingMode::Weighted).unwrap();
            for r in 0..=t {
                assert_eq!(out.row(r), base.row(r));
            }
        }
    }

    #[test]
    fn routing_equivalences() {
        let m = random_model(tiny_config(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seq = random_seq(&mut rng, 5, 11);
        let one_hot = forward(&m, &seq, &[0.2, 0.8], RoutingMode::OneHot).unwrap();
        let weighted = forward(&m, &seq, &[0.0, 1.0], RoutingMode::Weighted).unwrap();
        assert_eq!(one_hot, weighted);

        let id = ModelState::init(tiny_config(), 5).unwrap();
        let no = forward(&id, &seq, &[0.5, 0.5], RoutingMode::NoExpert).unwrap();
        let with = forward(&id, &seq, &[0.3, 0.7], RoutingMode::Weighted).unwrap();
        assert_eq!(no, with);
    }

    #[test]
    fn next_token_logits_match_full_forward() {
        let m = random_model(tiny_config(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seq = random_seq(&mut rng, 4, 11);
        let full = forward(&m, &seq, &[0.5, 0.5], RoutingMode::Weighted).unwrap();
        let last = next_token_logits(&m, &seq, &[0.5, 0.5], RoutingMode::Weighted).unwrap();
        for j in 0..11 {
            assert!((full[[3, j]] - last[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn too_long() {
        let m = random_model(tiny_config(), 1);
        let seq = TokenSeq::untyped(vec![1; 7]);
        assert!(matches!(
            forward(&m, &seq, &[0.5, 0.5], RoutingMode::Weighted),
            Err(Error::SequenceTooLong { len: 7, max: 6 })
        ));
    }

    #[test]
    fn nll_closed_forms() {
        let uniform = Array2::zeros((3, 7));
        let l = loss_nll(&uniform, &[1, 2, 3], &[true, true, true]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);

        let peaked = array![[1e4, 0.0, 0.0]];
        assert!(loss_nll(&peaked, &[0], &[true]).unwrap() < 1e-12);

        let two = array![[1.0, 0.0]];
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss_nll(&two, &[0], &[true]).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);

        assert!(matches!(loss_nll(&two, &[0], &[false]), Err(Error::EmptyMask)));
    }

    fn batch_loss(m: &ModelState, batch: &[TrainItem], mode: RoutingMode) -> f64 {
        let mut sum = 0.0;
        let mut n = 0;
        for item in batch {
            let logits = forward(m, &item.seq, &item.weights, mode).unwrap();
            let (s, c) = nll_sum(&logits, &item.targets, &item.mask).unwrap();
            sum += s;
            n += c;
        }
        sum / n as f64
    }

    fn fixture_batch(seed: u64) -> Vec<TrainItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..2)
            .map(|_| {
                let seq = random_seq(&mut rng, 6, 11);
                let targets = (0..6).map(|_| rng.random_range(0..11)).collect();
                let mask = vec![false, true, true, false, true, true];
                TrainItem { seq, targets, mask, weights: vec![0.35, 0.65] }
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = random_model(tiny_config(), 11);
        let batch = fixture_batch(12);
        let (_, grads) =
            backward(&model, &batch, RoutingMode::Weighted, &Trainable::all(2)).unwrap();
        let eps = 1e-4;

        let check = |analytic: Vec<Vec<f64>>, names: Vec<String>, perturb: &dyn Fn(&mut ModelState, usize, usize, f64)| {
            for (ti, (a, name)) in analytic.iter().zip(names).enumerate() {
                let mut num = vec![0.0; a.len()];
                for k in 0..a.len() {
                    let mut plus = model.clone();
                    perturb(&mut plus, ti, k, eps);
                    let mut minus = model.clone();
                    perturb(&mut minus, ti, k, -eps);
                    num[k] = (batch_loss(&plus, &batch, RoutingMode::Weighted)
                        - batch_loss(&minus, &batch, RoutingMode::Weighted))
                        / (2.0 * eps);
                }
                let diff: f64 = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nn: f64 = num.iter().map(|x| x * x).sum::<f64>().sqrt();
                let rel = diff / na.max(nn).max(1e-10);
                assert!(rel <= 1e-2, "{name}: relative error {rel}");
            }
        };

        let bb = grads.backbone.as_ref().unwrap();
        check(
            bb.tensors().iter().map(|t| t.to_vec()).collect(),
            bb.names(),
            &|m, ti, k, d| m.backbone.tensors_mut()[ti][k] += d,
        );
        for l in 0..2 {
            let e = grads.experts[l].as_ref().unwrap();
            check(
                e.tensors().iter().map(|t| t.to_vec()).collect(),
                e.names(),
                &move |m, ti, k, d| m.experts[l].tensors_mut()[ti][k] += d,
            );
        }
    }

    #[test]
    fn frozen_and_unused_experts_get_no_gradient() {
        let model = random_model(tiny_config(), 13);
        let batch = fixture_batch(14);
        let (_, g) = backward(&model, &batch, RoutingMode::Weighted, &Trainable::backbone_only(2)).unwrap();
        assert!(g.expert_is_zero(0) && g.expert_is_zero(1));
        assert!(g.backbone.is_some());

        let (_, g) = backward(&model, &batch, RoutingMode::OneHot, &Trainable::all(2)).unwrap();
        // weights (0.35, 0.65): expert 1 is routed, expert 0 unused
        assert!(g.expert_is_zero(0));
        assert!(!g.expert_is_zero(1));

        let (_, g) = backward(&model, &batch, RoutingMode::Weighted, &Trainable::single_expert(2, 1)).unwrap();
        assert!(g.backbone.is_none());
        assert!(g.experts[0].is_none());
    }

    #[test]
    fn backward_loss_matches_forward() {
        let model = random_model(tiny_config(), 15);
        let batch = fixture_batch(16);
        let (loss, _) = backward(&model, &batch, RoutingMode::Weighted, &Trainable::all(2)).unwrap();
        assert!((loss - batch_loss(&model, &batch, RoutingMode::Weighted)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut model = random_model(tiny_config(), 17);
        model.backbone.b_out[3] = f64::NAN;
        let batch = fixture_batch(18);
        assert!(matches!(
            backward(&model, &batch, RoutingMode::Weighted, &Trainable::all(2)),
            Err(Error::NonFiniteLoss)
        ));
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.6, 0.2, 0.1]), 1);
    }
}
