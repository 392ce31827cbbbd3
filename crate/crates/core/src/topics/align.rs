use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encoder::{EncoderParams, SparseInput};
use super::prodlda::encoder_input;
use super::TopicModel;
use crate::corpus::BowVector;
use crate::error::{Error, Result};
use crate::netcore::ParamTree;
use crate::trainer::adam::{adam_step, AdamConfig, AdamState, LinearSchedule};

/// Where the history encoder starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignInit {
    /// A copy of the topic model's own encoder (fine-tuning).
    FromTopicModel,
    /// Fresh random weights from the given seed.
    Random(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub init: AlignInit,
    pub betas: (f64, f64),
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 1e-6, seed: 0, batch_size: 32, init: AlignInit::FromTopicModel, betas: (0.9, 0.999) }
    }
}

/// Encoder that maps a dialogue history alone to the topic posterior mean
/// the frozen topic model assigns to history plus response.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceEncoder {
    pub encoder: EncoderParams,
    /// Mean squared error over the training pairs: before training, then
    /// after each epoch.
    pub mse_history: Vec<f64>,
}

fn mse(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    (a - b).mapv(|d| d * d).mean().unwrap_or(0.0)
}

fn dataset_mse(enc: &EncoderParams, inputs: &[SparseInput], targets: &[Array1<f64>]) -> f64 {
    let total: f64 = inputs.iter().zip(targets).map(|(x, t)| mse(&enc.forward(x).0, t)).sum();
    total / inputs.len() as f64
}

/// Trains the history encoder with MSE against the frozen topic model's
/// posterior means. The topic model is only read.
pub fn train_inference_encoder(
    model: &TopicModel,
    pairs: &[(BowVector, BowVector)],
    cfg: &AlignConfig,
) -> Result<InferenceEncoder> {
    if pairs.is_empty() {
        return Err(Error::invalid("no (history, full) pairs to align on"));
    }
    let usable: Vec<&(BowVector, BowVector)> =
        pairs.iter().filter(|(h, f)| !h.is_zero() && !f.is_zero()).collect();
    if usable.is_empty() {
        return Err(Error::invalid("every alignment pair has an empty bag of words"));
    }
    let zeros = vec![0.0; model.context_dim];
    let ctx = (model.context_dim > 0).then_some(zeros.as_slice());
    let inputs: Vec<SparseInput> =
        usable.iter().map(|(h, _)| encoder_input(h, model.vocab.len(), ctx)).collect();
    let targets: Vec<Array1<f64>> = usable
        .iter()
        .map(|(_, f)| model.encoder.forward(&encoder_input(f, model.vocab.len(), ctx)).0)
        .collect();

    let mut encoder = match cfg.init {
        AlignInit::FromTopicModel => model.encoder.clone(),
        AlignInit::Random(seed) => EncoderParams::init(
            model.encoder.input_dim(),
            model.encoder.hidden(),
            model.n_topics(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        ),
    };
    let mut history = vec![dataset_mse(&encoder, &inputs, &targets)];

    let batch_size = cfg.batch_size.max(1);
    let steps_per_epoch = inputs.len().div_ceil(batch_size) as u64;
    let schedule = LinearSchedule { total_steps: steps_per_epoch * cfg.epochs as u64 };
    let adam = AdamConfig { lr: cfg.lr, beta1: cfg.betas.0, beta2: cfg.betas.1, ..AdamConfig::default() };
    let mut state = AdamState::new(&encoder);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let l = model.n_topics() as f64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let mut grad = encoder.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (mu, _, cache) = encoder.forward(&inputs[i]);
                let d_mu = (&mu - &targets[i]) * (2.0 / l * scale);
                let d_lv = Array1::zeros(mu.len());
                encoder.backward(&inputs[i], &cache, &d_mu, &d_lv, &mut grad);
            }
            let factor = schedule.factor(state.step);
            adam_step(&mut encoder, &grad, &mut state, &adam, factor)?;
        }
        history.push(dataset_mse(&encoder, &inputs, &targets));
    }
    Ok(InferenceEncoder { encoder, mse_history: history })
}
