//! Stage (ii): one adapter expert per topic cluster, trained on
//! pseudo-conversations of that cluster's documents with the backbone frozen.

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{KnowledgeDoc, Vocab};
use crate::dialogform::to_pseudo_dialogues;
use crate::error::{Error, Result};
use crate::netcore::{self, indicator, ModelState, RoutingMode, TrainItem, Trainable};
use crate::trainer::adam::{adam_step, AdamState, LinearSchedule};
use crate::trainer::{clip_gradients, length_batches, mean_nll, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub cluster: usize,
    pub n_docs: usize,
    /// Token-weighted mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// NLL on the unpermuted pseudo-conversations before and after training;
    /// `None` for an empty cluster.
    pub initial_nll: Option<f64>,
    pub final_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertReport {
    pub clusters: Vec<ClusterReport>,
}

fn pseudo_items(
    docs: &[KnowledgeDoc],
    vocab: &Vocab,
    ratio: f64,
    max_len: usize,
    weights: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for doc in docs {
        for pd in to_pseudo_dialogues(doc, vocab, ratio, max_len, rng)? {
            items.push(TrainItem::from_sample(&pd.sample, weights.to_vec()));
        }
    }
    Ok(items)
}

/// Trains each expert `l` on the documents of cluster `l` with one-hot
/// routing to it. Only `model.experts[l]` is written while cluster `l` is
/// trained; the backbone is never touched. Sentence permutations are redrawn
/// every epoch.
pub fn train_experts(
    docs_by_cluster: &[Vec<KnowledgeDoc>],
    mut model: ModelState,
    vocab: &Vocab,
    cfg: &TrainConfig,
    permute_ratio: f64,
) -> Result<(ModelState, ExpertReport)> {
    cfg.validate()?;
    let n = model.config.n_experts;
    if docs_by_cluster.len() != n {
        return Err(Error::dims(format!("{} document clusters for {n} experts", docs_by_cluster.len())));
    }
    if vocab.len() != model.config.vocab_size {
        return Err(Error::dims("vocabulary size differs from the model config"));
    }
    let max_len = model.config.max_seq_len;
    let adam = cfg.adam();
    let mut clusters = Vec::with_capacity(n);

    for (l, docs) in docs_by_cluster.iter().enumerate() {
        if docs.is_empty() {
            warn!("cluster {l} has no documents; expert {l} stays at its identity init");
            clusters.push(ClusterReport { cluster: l, n_docs: 0, epoch_losses: vec![], initial_nll: None, final_nll: None });
            continue;
        }
        let w = indicator(n, l);
        let trainable = Trainable::single_expert(n, l);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(l as u64);

        let probe = pseudo_items(docs, vocab, 0.0, max_len, &w, &mut rng)?;
        let initial_nll = mean_nll(&model, &probe, RoutingMode::OneHot)?;

        let mut state = AdamState::new(&model.experts[l]);
        let mut schedule = None;
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let items = pseudo_items(docs, vocab, permute_ratio, max_len, &w, &mut rng)?;
            let lengths: Vec<usize> = items.iter().map(|it| it.seq.len()).collect();
            let batches = length_batches(&lengths, cfg.batch_size, &mut rng);
            let schedule = *schedule
                .get_or_insert(LinearSchedule { total_steps: (batches.len() * cfg.epochs) as u64 });
            let mut loss_sum = 0.0;
            let mut tokens = 0usize;
            for batch in &batches {
                let batch: Vec<TrainItem> = batch.iter().map(|&i| items[i].clone()).collect();
                let (loss, mut grads) = netcore::backward(&model, &batch, RoutingMode::OneHot, &trainable)?;
                clip_gradients(&mut grads, cfg.clip_norm);
                let g = grads.experts[l].as_ref().expect("expert l is trainable");
                let factor = schedule.factor(state.step);
                adam_step(&mut model.experts[l], g, &mut state, &adam, factor)?;
                let masked: usize = batch.iter().map(TrainItem::masked).sum();
                loss_sum += loss * masked as f64;
                tokens += masked;
            }
            let mean = loss_sum / tokens.max(1) as f64;
            info!("expert {l} epoch {}: loss {mean:.4}", epoch + 1);
            epoch_losses.push(mean);
        }
        let final_nll = mean_nll(&model, &probe, RoutingMode::OneHot)?;
        info!("expert {l}: {} docs, nll {initial_nll:.4} -> {final_nll:.4}", docs.len());
        clusters.push(ClusterReport {
            cluster: l,
            n_docs: docs.len(),
            epoch_losses,
            initial_nll: Some(initial_nll),
            final_nll: Some(final_nll),
        });
    }
    Ok((model, ExpertReport { clusters }))
}
