//! The three training stages, the optimizer and the resumable pipeline.

pub mod adam;
pub mod adapt;
pub mod config;
pub mod experts;
pub mod pipeline;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::netcore::{self, Gradients, ModelState, RoutingMode, TrainItem};

pub use adapt::{adapt_task, RunReport};
pub use config::{PipelineConfig, Stage, TrainConfig};
pub use experts::{train_experts, ClusterReport, ExpertReport};
pub use pipeline::{run_pipeline, ArtifactLayout, PipelineData, PipelineOutcome};

/// Groups item indices into batches of similar length. Equal lengths are
/// ordered randomly, and the batch order is shuffled.
pub fn length_batches<R: Rng + ?Sized>(lengths: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(rng);
    idx.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// Rescales gradients to global norm `max_norm` when they exceed it.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: Option<f64>) -> f64 {
    let norm = grads.norm_sq().sqrt();
    if let Some(max) = max_norm {
        if norm > max {
            grads.scale(max / norm);
        }
    }
    norm
}

/// Token-weighted mean NLL of `items` (no gradients).
pub fn mean_nll(model: &ModelState, items: &[TrainItem], mode: RoutingMode) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for item in items {
        let logits = netcore::forward(model, &item.seq, &item.weights, mode)?;
        let (s, c) = netcore::nll_sum(&logits, &item.targets, &item.mask)?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(crate::Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn batches_cover_each_item_once_and_group_lengths() {
        let lengths = [5, 1, 9, 1, 5, 9, 2, 7];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = length_batches(&lengths, 2, &mut rng);
        let mut all: Vec<usize> = b.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        // sorted lengths 1 1 2 5 5 7 9 9 -> batches {1,1} {2,5} {5,7} {9,9}
        let mut spans: Vec<(usize, usize)> = b
            .iter()
            .map(|x| (x.iter().map(|&i| lengths[i]).min().unwrap(), x.iter().map(|&i| lengths[i]).max().unwrap()))
            .collect();
        spans.sort();
        assert_eq!(spans, vec![(1, 1), (2, 5), (5, 7), (9, 9)]);
        let again = length_batches(&lengths, 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(b, again);
    }
}
