use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::layers::{
    adapter_delta, adapter_delta_backward, gelu, gelu_grad, layer_norm, layer_norm_backward,
    log_softmax, AdapterCache, LnCache,
};
use super::params::{Backbone, Block, Expert, Gradients, ModelState, ParamTree};
use crate::corpus::TokenSeq;
use crate::error::{Error, Result};

pub(crate) struct BlockCache {
    ln1: LnCache,
    normed1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LnCache,
    normed2: Array2<f64>,
    pre_gelu: Array2<f64>,
    post_gelu: Array2<f64>,
    adapters: Vec<(usize, f64, AdapterCache)>,
}

pub(crate) struct ForwardCache {
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    final_normed: Array2<f64>,
}

pub(crate) fn embed(model: &ModelState, seq: &TokenSeq) -> Result<Array2<f64>> {
    let cfg = &model.config;
    if seq.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: seq.len(), max: cfg.max_seq_len });
    }
    if seq.ids.len() != seq.type_ids.len() {
        return Err(Error::dims("token and type id lengths differ"));
    }
    let bb = &model.backbone;
    let mut x = Array2::zeros((seq.len(), cfg.hidden));
    for (t, (&id, &ty)) in seq.ids.iter().zip(&seq.type_ids).enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(Error::invalid(format!("token id {id} outside vocabulary")));
        }
        if ty as usize >= cfg.n_type_ids {
            return Err(Error::invalid(format!("type id {ty} outside range")));
        }
        let mut row = x.row_mut(t);
        row += &bb.tok_emb.row(id as usize);
        row += &bb.pos_emb.row(t);
        row += &bb.type_emb.row(ty as usize);
    }
    Ok(x)
}

fn attention(qkv: &Array2<f64>, n_heads: usize, h: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let t = qkv.nrows();
    let dh = h / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((t, h));
    let mut probs = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let q = qkv.slice(s![.., head * dh..(head + 1) * dh]);
        let k = qkv.slice(s![.., h + head * dh..h + (head + 1) * dh]);
        let v = qkv.slice(s![.., 2 * h + head * dh..2 * h + (head + 1) * dh]);
        let mut p = q.dot(&k.t());
        for (i, mut row) in p.outer_iter_mut().enumerate() {
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                row[j] *= scale;
                max = max.max(row[j]);
            }
            let mut sum = 0.0;
            for j in 0..=i {
                row[j] = (row[j] - max).exp();
                sum += row[j];
            }
            for j in 0..=i {
                row[j] /= sum;
            }
            for j in i + 1..t {
                row[j] = 0.0;
            }
        }
        out.slice_mut(s![.., head * dh..(head + 1) * dh]).assign(&p.dot(&v));
        probs.push(p);
    }
    (out, probs)
}

fn attention_backward(
    d_out: ArrayView2<f64>,
    qkv: &Array2<f64>,
    probs: &[Array2<f64>],
    h: usize,
) -> Array2<f64> {
    let n_heads = probs.len();
    let dh = h / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_qkv = Array2::zeros(qkv.dim());
    for (head, p) in probs.iter().enumerate() {
        let q = qkv.slice(s![.., head * dh..(head + 1) * dh]);
        let k = qkv.slice(s![.., h + head * dh..h + (head + 1) * dh]);
        let v = qkv.slice(s![.., 2 * h + head * dh..2 * h + (head + 1) * dh]);
        let d_o = d_out.slice(s![.., head * dh..(head + 1) * dh]);
        let d_p = d_o.dot(&v.t());
        let d_v = p.t().dot(&d_o);
        let mut d_s = Array2::zeros(p.dim());
        for i in 0..p.nrows() {
            let dot: f64 = (0..=i).map(|j| p[[i, j]] * d_p[[i, j]]).sum();
            for j in 0..=i {
                d_s[[i, j]] = p[[i, j]] * (d_p[[i, j]] - dot) * scale;
            }
        }
        d_qkv.slice_mut(s![.., head * dh..(head + 1) * dh]).assign(&d_s.dot(&k));
        d_qkv.slice_mut(s![.., h + head * dh..h + (head + 1) * dh]).assign(&d_s.t().dot(&q));
        d_qkv.slice_mut(s![.., 2 * h + head * dh..2 * h + (head + 1) * dh]).assign(&d_v);
    }
    d_qkv
}

fn block_forward(
    x: Array2<f64>,
    block: &Block,
    n_heads: usize,
    experts: &[Expert],
    layer: usize,
    weights: Option<&[f64]>,
    keep: bool,
) -> (Array2<f64>, Option<BlockCache>) {
    let h = x.ncols();
    let (normed1, ln1) = layer_norm(x.view(), &block.ln1);
    let qkv = normed1.dot(&block.w_qkv) + &block.b_qkv;
    let (attn, probs) = attention(&qkv, n_heads, h);
    let x1 = x + &(attn.dot(&block.w_o) + &block.b_o);
    let (normed2, ln2) = layer_norm(x1.view(), &block.ln2);
    let pre_gelu = normed2.dot(&block.w_fc) + &block.b_fc;
    let post_gelu = pre_gelu.mapv(gelu);
    let x2 = x1 + &(post_gelu.dot(&block.w_proj) + &block.b_proj);

    let mut adapters = Vec::new();
    let out = match weights {
        None => x2,
        Some(w) => {
            // Shared residual plus weighted bottleneck outputs; equal to the
            // weighted sum of full adapter outputs because the weights sum
            // to one, and exact for indicator weights.
            let mut mix = Array2::zeros(x2.dim());
            for (l, &wl) in w.iter().enumerate() {
                if wl == 0.0 {
                    continue;
                }
                let (delta, cache) = adapter_delta(x2.view(), &experts[l].layers[layer]);
                mix.scaled_add(wl, &delta);
                if keep {
                    adapters.push((l, wl, cache));
                }
            }
            x2 + &mix
        }
    };
    let cache = keep.then(|| BlockCache {
        ln1,
        normed1,
        qkv,
        probs,
        attn,
        ln2,
        normed2,
        pre_gelu,
        post_gelu,
        adapters,
    });
    (out, cache)
}

/// Final hidden states after the last block and its adapters.
pub(crate) fn hidden_states(
    model: &ModelState,
    seq: &TokenSeq,
    weights: Option<&[f64]>,
    keep: bool,
) -> Result<(Array2<f64>, Vec<BlockCache>)> {
    let mut x = embed(model, seq)?;
    let mut caches = Vec::new();
    for (i, block) in model.backbone.blocks.iter().enumerate() {
        let (next, cache) =
            block_forward(x, block, model.config.n_heads, &model.experts, i, weights, keep);
        x = next;
        caches.extend(cache);
    }
    Ok((x, caches))
}

pub(crate) fn forward_logits(
    model: &ModelState,
    seq: &TokenSeq,
    weights: Option<&[f64]>,
) -> Result<Array2<f64>> {
    let (x, _) = hidden_states(model, seq, weights, false)?;
    let (normed, _) = layer_norm(x.view(), &model.backbone.ln_f);
    Ok(normed.dot(&model.backbone.w_out) + &model.backbone.b_out)
}

/// Logits for the last position only.
pub(crate) fn last_logits(
    model: &ModelState,
    seq: &TokenSeq,
    weights: Option<&[f64]>,
) -> Result<Array1<f64>> {
    if seq.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    let (x, _) = hidden_states(model, seq, weights, false)?;
    let last = x.slice(s![x.nrows() - 1.., ..]);
    let (normed, _) = layer_norm(last, &model.backbone.ln_f);
    Ok(normed.row(0).dot(&model.backbone.w_out) + &model.backbone.b_out)
}

pub(crate) fn forward_with_cache(
    model: &ModelState,
    seq: &TokenSeq,
    weights: Option<&[f64]>,
) -> Result<(Array2<f64>, ForwardCache)> {
    let (x, blocks) = hidden_states(model, seq, weights, true)?;
    let (final_normed, ln_f) = layer_norm(x.view(), &model.backbone.ln_f);
    let logits = final_normed.dot(&model.backbone.w_out) + &model.backbone.b_out;
    Ok((logits, ForwardCache { blocks, ln_f, final_normed }))
}

/// Which parameter blocks receive gradients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub experts: Vec<bool>,
}

impl Trainable {
    pub fn all(n_experts: usize) -> Self {
        Self { backbone: true, experts: vec![true; n_experts] }
    }

    /// Task adaptation: experts frozen.
    pub fn backbone_only(n_experts: usize) -> Self {
        Self { backbone: true, experts: vec![false; n_experts] }
    }

    /// Expert training: backbone and the other experts frozen.
    pub fn single_expert(n_experts: usize, l: usize) -> Self {
        let mut experts = vec![false; n_experts];
        experts[l] = true;
        Self { backbone: false, experts }
    }

    pub fn empty_gradients(&self, model: &ModelState) -> Gradients {
        Gradients {
            backbone: self.backbone.then(|| model.backbone.zeros_like()),
            experts: model
                .experts
                .iter()
                .zip(&self.experts)
                .map(|(e, &on)| on.then(|| e.zeros_like()))
                .collect(),
        }
    }
}

/// Sum of `-log p(target)` over masked positions, and `d(sum * scale)/dlogits`.
pub(crate) fn nll_and_grad(
    logits: &Array2<f64>,
    targets: &[u32],
    mask: &[bool],
    scale: f64,
) -> Result<(f64, Array2<f64>)> {
    let mut d = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for (t, row) in logits.outer_iter().enumerate() {
        if !mask[t] {
            continue;
        }
        let ls = log_softmax(row.as_slice().expect("contiguous row"));
        let target = targets[t] as usize;
        total -= ls[target];
        let mut drow = d.row_mut(t);
        for (j, l) in ls.iter().enumerate() {
            drow[j] = scale * l.exp();
        }
        drow[target] -= scale;
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((total, d))
}

/// Backpropagates `d_logits` and accumulates parameter gradients.
pub(crate) fn backward_from_logits(
    model: &ModelState,
    seq: &TokenSeq,
    cache: &ForwardCache,
    d_logits: &Array2<f64>,
    grads: &mut Gradients,
) {
    let bb = &model.backbone;
    let h = model.config.hidden;
    let mut g_bb: Option<&mut Backbone> = grads.backbone.as_mut();

    if let Some(g) = g_bb.as_deref_mut() {
        g.w_out += &cache.final_normed.t().dot(d_logits);
        g.b_out += &d_logits.sum_axis(Axis(0));
    }
    let d_normed = d_logits.dot(&bb.w_out.t());
    let mut dx = layer_norm_backward(
        d_normed.view(),
        &cache.ln_f,
        &bb.ln_f,
        g_bb.as_deref_mut().map(|g| &mut g.ln_f),
    );

    for (i, (block, bc)) in bb.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        // adapters: out = x2 + sum_l w_l delta_l(x2)
        let mut d_x2 = dx.clone();
        for (l, wl, ac) in &bc.adapters {
            let d_delta = &dx * *wl;
            let g_exp = grads.experts[*l].as_mut().map(|e| &mut e.layers[i]);
            d_x2 += &adapter_delta_backward(
                d_delta.view(),
                ac,
                &model.experts[*l].layers[i],
                g_exp,
            );
        }

        let mut g_block = g_bb.as_deref_mut().map(|g| &mut g.blocks[i]);

        // MLP: x2 = x1 + gelu(LN2(x1) W_fc + b_fc) W_proj + b_proj
        if let Some(g) = g_block.as_deref_mut() {
            g.w_proj += &bc.post_gelu.t().dot(&d_x2);
            g.b_proj += &d_x2.sum_axis(Axis(0));
        }
        let mut d_pre = d_x2.dot(&block.w_proj.t());
        d_pre.zip_mut_with(&bc.pre_gelu, |d, &f| *d *= gelu_grad(f));
        if let Some(g) = g_block.as_deref_mut() {
            g.w_fc += &bc.normed2.t().dot(&d_pre);
            g.b_fc += &d_pre.sum_axis(Axis(0));
        }
        let d_normed2 = d_pre.dot(&block.w_fc.t());
        let d_x1 = d_x2
            + &layer_norm_backward(
                d_normed2.view(),
                &bc.ln2,
                &block.ln2,
                g_block.as_deref_mut().map(|g| &mut g.ln2),
            );

        // attention: x1 = x0 + attn(LN1(x0)) W_o + b_o
        if let Some(g) = g_block.as_deref_mut() {
            g.w_o += &bc.attn.t().dot(&d_x1);
            g.b_o += &d_x1.sum_axis(Axis(0));
        }
        let d_attn = d_x1.dot(&block.w_o.t());
        let d_qkv = attention_backward(d_attn.view(), &bc.qkv, &bc.probs, h);
        if let Some(g) = g_block.as_deref_mut() {
            g.w_qkv += &bc.normed1.t().dot(&d_qkv);
            g.b_qkv += &d_qkv.sum_axis(Axis(0));
        }
        let d_normed1 = d_qkv.dot(&block.w_qkv.t());
        dx = d_x1
            + &layer_norm_backward(
                d_normed1.view(),
                &bc.ln1,
                &block.ln1,
                g_block.as_deref_mut().map(|g| &mut g.ln1),
            );
    }

    if let Some(g) = g_bb {
        for (t, (&id, &ty)) in seq.ids.iter().zip(&seq.type_ids).enumerate() {
            let row = dx.row(t);
            let mut r = g.tok_emb.row_mut(id as usize);
            r += &row;
            let mut r = g.pos_emb.row_mut(t);
            r += &row;
            let mut r = g.type_emb.row_mut(ty as usize);
            r += &row;
        }
    }
}
