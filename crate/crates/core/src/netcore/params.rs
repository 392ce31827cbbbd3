use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::ModelConfig;

/// A fixed-order collection of parameter tensors.
///
/// Optimizers, checksums and checkpoints all walk `tensors()` in the same
/// order, so two trees built from the same config line up element for
/// element.
pub trait ParamTree: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    fn names(&self) -> Vec<String>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// SHA-256 over the little-endian bit patterns of every value.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for x in t {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub(crate) fn sl1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn sl2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn sl1m(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn sl2m(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNormParams {
    pub fn new(h: usize) -> Self {
        Self { gain: Array1::ones(h), bias: Array1::zeros(h) }
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2: LayerNormParams,
    pub w_fc: Array2<f64>,
    pub b_fc: Array1<f64>,
    pub w_proj: Array2<f64>,
    pub b_proj: Array1<f64>,
}

/// Shared transformer parameters: embeddings, blocks, final norm and the
/// output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub type_emb: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNormParams,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

/// Bottleneck adapter for one layer: `ReLU(LN(H) W_hd) W_dh + H`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub ln: LayerNormParams,
    pub w_hd: Array2<f64>,
    pub w_dh: Array2<f64>,
}

/// One knowledge expert: an adapter after every transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub layers: Vec<AdapterParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub experts: Vec<Expert>,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl Backbone {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden;
        let std = 0.02;
        let proj_std = 0.02 / (2.0 * cfg.n_layers as f64).sqrt();
        let tok_emb = normal(rng, cfg.vocab_size, h, std);
        let pos_emb = normal(rng, cfg.max_seq_len, h, 0.01);
        let type_emb = normal(rng, cfg.n_type_ids, h, std);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1: LayerNormParams::new(h),
                w_qkv: normal(rng, h, 3 * h, std),
                b_qkv: Array1::zeros(3 * h),
                w_o: normal(rng, h, h, proj_std),
                b_o: Array1::zeros(h),
                ln2: LayerNormParams::new(h),
                w_fc: normal(rng, h, 4 * h, std),
                b_fc: Array1::zeros(4 * h),
                w_proj: normal(rng, 4 * h, h, proj_std),
                b_proj: Array1::zeros(h),
            })
            .collect();
        Self {
            tok_emb,
            pos_emb,
            type_emb,
            blocks,
            ln_f: LayerNormParams::new(h),
            // Wide enough that a frozen readout can still express peaked
            // next-token distributions once adapters steer the hidden state.
            w_out: normal(rng, h, cfg.vocab_size, (h as f64).powf(-0.5)),
            b_out: Array1::zeros(cfg.vocab_size),
        }
    }
}

impl Expert {
    /// `W_hd` small-normal, `W_dh` zero, LN identity: the adapter starts as
    /// the identity map.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (h, d) = (cfg.hidden, cfg.bottleneck);
        let layers = (0..cfg.n_layers)
            .map(|_| AdapterParams {
                ln: LayerNormParams::new(h),
                w_hd: normal(rng, h, d, 0.02),
                w_dh: Array2::zeros((d, h)),
            })
            .collect();
        Self { layers }
    }

    /// Fills every `W_dh` with small-normal values so the adapter is no
    /// longer the identity. Used by tests and gradient checks.
    pub fn randomize_up_projections(&mut self, rng: &mut ChaCha8Rng, std: f64) {
        let dist = Normal::new(0.0, std).expect("positive std");
        for layer in &mut self.layers {
            layer.w_dh.mapv_inplace(|_| dist.sample(rng));
        }
    }
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> crate::Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init(&config, &mut rng);
        let experts = (0..config.n_experts).map(|_| Expert::init(&config, &mut rng)).collect();
        Ok(Self { config, backbone, experts })
    }
}

impl ParamTree for LayerNormParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![sl1(&self.gain), sl1(&self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![sl1m(&mut self.gain), sl1m(&mut self.bias)]
    }

    fn names(&self) -> Vec<String> {
        vec!["gain".into(), "bias".into()]
    }
}

fn prefixed(prefix: &str, names: Vec<String>) -> impl Iterator<Item = String> + '_ {
    names.into_iter().map(move |n| format!("{prefix}.{n}"))
}

impl ParamTree for Block {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.ln1.tensors();
        v.extend([sl2(&self.w_qkv), sl1(&self.b_qkv), sl2(&self.w_o), sl1(&self.b_o)]);
        v.extend(self.ln2.tensors());
        v.extend([sl2(&self.w_fc), sl1(&self.b_fc), sl2(&self.w_proj), sl1(&self.b_proj)]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let Block { ln1, w_qkv, b_qkv, w_o, b_o, ln2, w_fc, b_fc, w_proj, b_proj } = self;
        let mut v = ln1.tensors_mut();
        v.extend([sl2m(w_qkv), sl1m(b_qkv), sl2m(w_o), sl1m(b_o)]);
        v.extend(ln2.tensors_mut());
        v.extend([sl2m(w_fc), sl1m(b_fc), sl2m(w_proj), sl1m(b_proj)]);
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = prefixed("ln1", self.ln1.names()).collect();
        v.extend(["w_qkv", "b_qkv", "w_o", "b_o"].map(String::from));
        v.extend(prefixed("ln2", self.ln2.names()));
        v.extend(["w_fc", "b_fc", "w_proj", "b_proj"].map(String::from));
        v
    }
}

impl ParamTree for Backbone {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = vec![sl2(&self.tok_emb), sl2(&self.pos_emb), sl2(&self.type_emb)];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend(self.ln_f.tensors());
        v.extend([sl2(&self.w_out), sl1(&self.b_out)]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let Backbone { tok_emb, pos_emb, type_emb, blocks, ln_f, w_out, b_out } = self;
        let mut v = vec![sl2m(tok_emb), sl2m(pos_emb), sl2m(type_emb)];
        for b in blocks {
            v.extend(b.tensors_mut());
        }
        v.extend(ln_f.tensors_mut());
        v.extend([sl2m(w_out), sl1m(b_out)]);
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["tok_emb", "pos_emb", "type_emb"].map(String::from).to_vec();
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("block{i}"), b.names()));
        }
        v.extend(prefixed("ln_f", self.ln_f.names()));
        v.extend(["w_out", "b_out"].map(String::from));
        v
    }
}

impl ParamTree for AdapterParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.ln.tensors();
        v.extend([sl2(&self.w_hd), sl2(&self.w_dh)]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let AdapterParams { ln, w_hd, w_dh } = self;
        let mut v = ln.tensors_mut();
        v.extend([sl2m(w_hd), sl2m(w_dh)]);
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = prefixed("ln", self.ln.names()).collect();
        v.extend(["w_hd", "w_dh"].map(String::from));
        v
    }
}

impl ParamTree for Expert {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    fn names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("adapter{i}"), l.names()).collect::<Vec<_>>())
            .collect()
    }
}

impl<T: ParamTree> ParamTree for Vec<T> {
    fn tensors(&self) -> Vec<&[f64]> {
        self.iter().flat_map(|t| t.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().flat_map(|t| t.tensors_mut()).collect()
    }

    fn names(&self) -> Vec<String> {
        self.iter()
            .enumerate()
            .flat_map(|(i, t)| prefixed(&format!("{i}"), t.names()).collect::<Vec<_>>())
            .collect()
    }
}

/// Gradients partitioned like [`ModelState`]. Frozen blocks are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: Option<Backbone>,
    pub experts: Vec<Option<Expert>>,
}

impl Gradients {
    pub fn expert_is_zero(&self, l: usize) -> bool {
        match &self.experts[l] {
            None => true,
            Some(e) => e.tensors().iter().all(|t| t.iter().all(|&x| x == 0.0)),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.backbone.as_ref().is_none_or(|b| b.all_finite())
            && self.experts.iter().flatten().all(|e| e.all_finite())
    }

    /// Squared L2 norm over every present block.
    pub fn norm_sq(&self) -> f64 {
        let mut s = 0.0;
        if let Some(b) = &self.backbone {
            s += b.tensors().iter().flat_map(|t| t.iter()).map(|x| x * x).sum::<f64>();
        }
        for e in self.experts.iter().flatten() {
            s += e.tensors().iter().flat_map(|t| t.iter()).map(|x| x * x).sum::<f64>();
        }
        s
    }

    pub fn scale(&mut self, factor: f64) {
        if let Some(b) = &mut self.backbone {
            for t in b.tensors_mut() {
                t.iter_mut().for_each(|x| *x *= factor);
            }
        }
        for e in self.experts.iter_mut().flatten() {
            for t in e.tensors_mut() {
                t.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            hidden: 8,
            bottleneck: 4,
            n_experts: 3,
            vocab_size: 11,
            max_seq_len: 6,
            n_type_ids: 2,
        }
    }

    #[test]
    fn counts_match_config() {
        let cfg = tiny();
        let m = ModelState::init(cfg.clone(), 0).unwrap();
        let (h, d, v, t) = (8, 4, 11, 6);
        let block = 2 * h + h * 3 * h + 3 * h + h * h + h + 2 * h + h * 4 * h + 4 * h + 4 * h * h + h;
        let backbone = v * h + t * h + 2 * h + 2 * block + 2 * h + h * v + v;
        assert_eq!(m.backbone.num_params(), backbone);
        for e in &m.experts {
            assert_eq!(e.num_params(), 2 * (2 * h + h * d + d * h));
        }
        assert_eq!(m.backbone.names().len(), m.backbone.tensors().len());
        assert!(m.backbone.all_finite());
    }

    #[test]
    fn init_is_identity_adapter_and_seeded() {
        let a = ModelState::init(tiny(), 7).unwrap();
        let b = ModelState::init(tiny(), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.backbone.checksum(), b.backbone.checksum());
        for e in &a.experts {
            for l in &e.layers {
                assert!(l.w_dh.iter().all(|&x| x == 0.0));
                assert!(l.w_hd.iter().any(|&x| x != 0.0));
            }
        }
        let c = ModelState::init(tiny(), 8).unwrap();
        assert_ne!(a.backbone.checksum(), c.backbone.checksum());
    }
}
