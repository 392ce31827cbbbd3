//! Stage (iii): fine-tune the backbone on dialogues with the experts frozen
//! and routing weights inferred from each sample's history.

use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueSample, Vocab};
use crate::dialogform::serialize_dialogue;
use crate::error::{Error, Result};
use crate::evalkit::Routing;
use crate::netcore::{self, ModelState, RoutingMode, TrainItem, Trainable};
use crate::trainer::adam::{adam_step, AdamState, LinearSchedule};
use crate::trainer::{clip_gradients, length_batches, mean_nll, TrainConfig};

/// Per-epoch record of task adaptation. Epoch indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub epoch_losses: Vec<f64>,
    pub valid_ppl_seen: Vec<f64>,
    pub valid_ppl_unseen: Vec<f64>,
    pub selected_epoch: usize,
    /// Validation PPLs of the model before adaptation.
    pub initial_ppl_seen: f64,
    pub initial_ppl_unseen: f64,
    /// Wall-clock seconds per epoch. Kept out of the JSON report so that
    /// reruns produce identical files; see [`RunReport::timing_json`].
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
}

impl RunReport {
    /// The model-selection criterion for `epoch`.
    pub fn criterion(&self, epoch: usize) -> f64 {
        self.valid_ppl_seen[epoch] + self.valid_ppl_unseen[epoch]
    }

    pub fn timing_json(&self) -> serde_json::Value {
        serde_json::json!({ "epoch_seconds": self.epoch_seconds })
    }
}

fn dialogue_items(
    data: &[DialogueSample],
    vocab: &Vocab,
    routing: Routing<'_>,
    max_len: usize,
) -> Result<Vec<TrainItem>> {
    data.iter()
        .map(|s| {
            let ser = serialize_dialogue(s, vocab, max_len)?;
            let w = routing.weights(&s.turns)?;
            Ok(TrainItem::from_sample(&ser, w.as_slice().to_vec()))
        })
        .collect()
}

/// Fine-tunes the backbone with early stopping on `PPL_seen + PPL_unseen`
/// and returns the model from the best epoch.
#[allow(clippy::too_many_arguments)]
pub fn adapt_task(
    train: &[DialogueSample],
    valid_seen: &[DialogueSample],
    valid_unseen: &[DialogueSample],
    mut model: ModelState,
    vocab: &Vocab,
    routing: Routing<'_>,
    mode: RoutingMode,
    cfg: &TrainConfig,
) -> Result<(ModelState, RunReport)> {
    cfg.validate()?;
    if valid_seen.is_empty() || valid_unseen.is_empty() {
        return Err(Error::invalid("validation sets must be non-empty"));
    }
    if train.is_empty() {
        return Err(Error::invalid("no training dialogues"));
    }
    if vocab.len() != model.config.vocab_size {
        return Err(Error::dims("vocabulary size differs from the model config"));
    }
    let max_len = model.config.max_seq_len;
    let train_items = dialogue_items(train, vocab, routing, max_len)?;
    let seen_items = dialogue_items(valid_seen, vocab, routing, max_len)?;
    let unseen_items = dialogue_items(valid_unseen, vocab, routing, max_len)?;
    let ppl = |m: &ModelState, items: &[TrainItem]| mean_nll(m, items, mode).map(f64::exp);

    let n = model.config.n_experts;
    let trainable = Trainable::backbone_only(n);
    let adam = cfg.adam();
    let mut state = AdamState::new(&model.backbone);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lengths: Vec<usize> = train_items.iter().map(|it| it.seq.len()).collect();
    let steps_per_epoch = train_items.len().div_ceil(cfg.batch_size);
    let schedule = LinearSchedule { total_steps: (steps_per_epoch * cfg.epochs) as u64 };

    let mut report = RunReport {
        epoch_losses: vec![],
        valid_ppl_seen: vec![],
        valid_ppl_unseen: vec![],
        selected_epoch: 0,
        initial_ppl_seen: ppl(&model, &seen_items)?,
        initial_ppl_unseen: ppl(&model, &unseen_items)?,
        epoch_seconds: vec![],
    };
    let mut best: Option<(usize, f64, netcore::Backbone)> = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let batches = length_batches(&lengths, cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        for batch in &batches {
            let batch: Vec<TrainItem> = batch.iter().map(|&i| train_items[i].clone()).collect();
            let (loss, mut grads) = netcore::backward(&model, &batch, mode, &trainable)?;
            clip_gradients(&mut grads, cfg.clip_norm);
            let g = grads.backbone.as_ref().expect("backbone is trainable");
            let factor = schedule.factor(state.step);
            adam_step(&mut model.backbone, g, &mut state, &adam, factor)?;
            let masked: usize = batch.iter().map(TrainItem::masked).sum();
            loss_sum += loss * masked as f64;
            tokens += masked;
        }
        report.epoch_losses.push(loss_sum / tokens.max(1) as f64);
        report.valid_ppl_seen.push(ppl(&model, &seen_items)?);
        report.valid_ppl_unseen.push(ppl(&model, &unseen_items)?);
        report.epoch_seconds.push(start.elapsed().as_secs_f64());
        let crit = report.criterion(epoch);
        info!(
            "adapt epoch {}: loss {:.4}, ppl seen {:.3}, unseen {:.3}",
            epoch + 1,
            report.epoch_losses[epoch],
            report.valid_ppl_seen[epoch],
            report.valid_ppl_unseen[epoch]
        );
        if best.as_ref().is_none_or(|b| crit < b.1) {
            best = Some((epoch, crit, model.backbone.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            info!("early stop after epoch {}", epoch + 1);
            break;
        }
    }
    if let Some((epoch, _, backbone)) = best {
        report.selected_epoch = epoch;
        model.backbone = backbone;
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, gen_synthetic, SyntheticSpec};
    use crate::netcore::{ModelConfig, ParamTree};
    use crate::topics::TopicWeights;
    use crate::trainer::Stage;

    fn setup() -> (Vec<DialogueSample>, Vocab, ModelState) {
        let data = gen_synthetic(&SyntheticSpec::new(2, 4, 10, 3, 5).with_sentence_len(4).with_dialogues_per_cluster(8));
        let texts: Vec<String> = data.dialogues.iter().map(DialogueSample::full_text).collect();
        let vocab = build_vocab(&texts, 1000).unwrap();
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            hidden: 16,
            bottleneck: 8,
            n_experts: 2,
            vocab_size: vocab.len(),
            max_seq_len: 64,
            n_type_ids: 2,
        };
        let mut model = ModelState::init(cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for e in &mut model.experts {
            e.randomize_up_projections(&mut rng, 0.05);
        }
        (data.dialogues, vocab, model)
    }

    fn cfg(epochs: usize, patience: usize) -> TrainConfig {
        TrainConfig { lr: 1e-2, epochs, patience, batch_size: 4, ..TrainConfig::for_stage(Stage::Adapt) }
    }

    #[test]
    fn experts_frozen_and_ppl_improves() {
        let (d, vocab, model) = setup();
        let w = TopicWeights::uniform(2);
        let experts = model.experts.checksum();
        let (adapted, report) =
            adapt_task(&d[..12], &d[12..14], &d[14..], model, &vocab, Routing::Fixed(&w), RoutingMode::Weighted, &cfg(6, 5))
                .unwrap();
        assert_eq!(adapted.experts.checksum(), experts);
        let sel = report.selected_epoch;
        assert!(report.valid_ppl_seen[sel] < report.initial_ppl_seen);
        assert!(report.valid_ppl_unseen[sel] < report.initial_ppl_unseen);
        assert_eq!(report.epoch_seconds.len(), report.epoch_losses.len());
    }

    #[test]
    fn selection_is_argmin_and_stops_within_patience() {
        let (d, vocab, model) = setup();
        let w = TopicWeights::uniform(2);
        // A large rate makes validation PPL bounce so that early stopping fires.
        let c = TrainConfig { lr: 0.5, ..cfg(30, 2) };
        let (adapted, report) =
            adapt_task(&d[..12], &d[12..14], &d[14..], model.clone(), &vocab, Routing::Fixed(&w), RoutingMode::Weighted, &c)
                .unwrap();
        let n = report.epoch_losses.len();
        let argmin = (0..n).min_by(|&a, &b| report.criterion(a).total_cmp(&report.criterion(b))).unwrap();
        assert_eq!(report.selected_epoch, argmin);
        assert!(n <= argmin + 1 + c.patience);
        // The returned model is the selected epoch's, so its PPL matches the record.
        let seen = crate::evalkit::perplexity(&adapted, &vocab, Routing::Fixed(&w), &d[12..14], RoutingMode::Weighted).unwrap();
        assert!((seen - report.valid_ppl_seen[argmin]).abs() < 1e-9);
    }

    #[test]
    fn report_json_is_stable_and_excludes_timing() {
        let (d, vocab, model) = setup();
        let w = TopicWeights::uniform(2);
        let run = || {
            adapt_task(&d[..12], &d[12..14], &d[14..], model.clone(), &vocab, Routing::Fixed(&w), RoutingMode::Weighted, &cfg(2, 5))
                .unwrap()
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a.backbone.checksum(), b.backbone.checksum());
        assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
        assert!(!serde_json::to_string(&ra).unwrap().contains("seconds"));
    }

    #[test]
    fn empty_validation_is_an_error() {
        let (d, vocab, model) = setup();
        let w = TopicWeights::uniform(2);
        let r = adapt_task(&d[..12], &[], &d[14..], model, &vocab, Routing::Fixed(&w), RoutingMode::Weighted, &cfg(1, 5));
        assert!(r.is_err());
    }
}
