use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::encoder::{EncoderParams, SparseInput};
use super::{softmax, TopicModel};
use crate::corpus::{BowVector, Vocab, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::netcore::params::{sl2, sl2m};
use crate::netcore::ParamTree;
use crate::trainer::adam::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq)]
pub struct TopicTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
    pub batch_size: usize,
    pub betas: (f64, f64),
}

impl Default for TopicTrainConfig {
    fn default() -> Self {
        Self { epochs: 50, lr: 2e-3, seed: 0, hidden: 100, batch_size: 64, betas: (0.9, 0.999) }
    }
}

/// Trainable part of the topic model.
#[derive(Debug, Clone, PartialEq)]
pub struct ProdLdaParams {
    pub encoder: EncoderParams,
    /// `L x V` topic-word weights.
    pub beta: Array2<f64>,
}

impl ParamTree for ProdLdaParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.tensors();
        v.push(sl2(&self.beta));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let ProdLdaParams { encoder, beta } = self;
        let mut v = encoder.tensors_mut();
        v.push(sl2m(beta));
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.encoder.names().into_iter().map(|n| format!("encoder.{n}")).collect();
        v.push("beta".into());
        v
    }
}

/// Laplace approximation of a symmetric Dirichlet(alpha) in softmax basis:
/// returns the (mean, variance) of the Gaussian prior on each logit.
pub fn laplace_prior(n_topics: usize, alpha: f64) -> (Array1<f64>, Array1<f64>) {
    let k = n_topics as f64;
    let alphas = vec![alpha; n_topics];
    let mean_log: f64 = alphas.iter().map(|a| a.ln()).sum::<f64>() / k;
    let inv_sum: f64 = alphas.iter().map(|a| 1.0 / a).sum();
    let mu = alphas.iter().map(|a| a.ln() - mean_log).collect();
    let var = alphas.iter().map(|a| (1.0 / a) * (1.0 - 2.0 / k) + inv_sum / (k * k)).collect();
    (mu, var)
}

/// Encoder input: L1-normalized word counts followed by the optional
/// context vector.
pub(crate) fn encoder_input(bow: &BowVector, vocab_len: usize, context: Option<&[f64]>) -> SparseInput {
    let total = bow.l1();
    let mut x: SparseInput = if total > 0.0 {
        bow.entries().iter().map(|&(id, c)| (id as usize - NUM_SPECIALS, c / total)).collect()
    } else {
        Vec::new()
    };
    if let Some(ctx) = context {
        let offset = vocab_len - NUM_SPECIALS;
        x.extend(ctx.iter().enumerate().map(|(i, &v)| (offset + i, v)));
    }
    x
}

/// Negative ELBO of one document for a fixed noise draw, with gradients
/// accumulated into `grad` when provided.
///
/// `-ELBO = -sum_v n_v log softmax(theta beta)_v + KL(N(mu, var) || prior)`
/// where `theta = softmax(mu + exp(lv / 2) * noise)`.
pub(crate) fn neg_elbo(
    params: &ProdLdaParams,
    prior: (&Array1<f64>, &Array1<f64>),
    x: &[(usize, f64)],
    bow: &BowVector,
    noise: &[f64],
    grad: Option<&mut ProdLdaParams>,
) -> f64 {
    let (mu, lv, cache) = params.encoder.forward(x);
    let (prior_mu, prior_var) = prior;
    let sigma = lv.mapv(|v| (0.5 * v).exp());
    let z: Array1<f64> = &mu + &(&sigma * &Array1::from(noise.to_vec()));
    let theta = softmax(z.as_slice().expect("contiguous"));
    let theta = Array1::from(theta);
    let logits = theta.dot(&params.beta);
    let log_p = {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        logits.mapv(|v| v - lse)
    };
    let counts: Vec<(usize, f64)> =
        bow.entries().iter().map(|&(id, c)| (id as usize - NUM_SPECIALS, c)).collect();
    let rec: f64 = -counts.iter().map(|&(v, c)| c * log_p[v]).sum::<f64>();
    let var = lv.mapv(f64::exp);
    let kl: f64 = 0.5
        * (0..mu.len())
            .map(|k| {
                var[k] / prior_var[k] + (mu[k] - prior_mu[k]).powi(2) / prior_var[k] - 1.0
                    + prior_var[k].ln()
                    - lv[k]
            })
            .sum::<f64>();

    if let Some(g) = grad {
        let n: f64 = counts.iter().map(|c| c.1).sum();
        let mut d_logits = log_p.mapv(|l| n * l.exp());
        for &(v, c) in &counts {
            d_logits[v] -= c;
        }
        // logits = theta . beta
        for k in 0..theta.len() {
            let mut row = g.beta.row_mut(k);
            row.scaled_add(theta[k], &d_logits);
        }
        let d_theta = params.beta.dot(&d_logits);
        let inner = theta.dot(&d_theta);
        let d_z = &theta * &(&d_theta - inner);
        let d_mu = &d_z + &((&mu - prior_mu) / prior_var);
        let noise = Array1::from(noise.to_vec());
        let d_lv = &d_z * &noise * &sigma * 0.5 + &((&var / prior_var - 1.0) * 0.5);
        params.encoder.backward(x, &cache, &d_mu, &d_lv, &mut g.encoder);
    }
    rec + kl
}

/// Fits the topic model by maximizing the ELBO with Adam.
///
/// Documents with an all-zero bag of words are skipped with a warning.
pub fn train_topic_model(
    vocab: &Vocab,
    bows: &[BowVector],
    context: Option<&[Vec<f64>]>,
    n_topics: usize,
    cfg: &TopicTrainConfig,
) -> Result<TopicModel> {
    if n_topics < 2 {
        return Err(Error::invalid("the topic model needs at least 2 clusters"));
    }
    if bows.len() < n_topics {
        return Err(Error::invalid(format!(
            "{} documents for {n_topics} clusters; need at least one per cluster",
            bows.len()
        )));
    }
    if vocab.len() <= NUM_SPECIALS {
        return Err(Error::EmptyCorpus);
    }
    let context_dim = match context {
        None => 0,
        Some(ctx) => {
            if ctx.len() != bows.len() {
                return Err(Error::dims(format!("{} context vectors for {} documents", ctx.len(), bows.len())));
            }
            let dim = ctx.first().map_or(0, Vec::len);
            if ctx.iter().any(|c| c.len() != dim) {
                return Err(Error::dims("context vectors differ in length"));
            }
            dim
        }
    };
    if cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::invalid("batch_size and hidden must be positive"));
    }

    let usable: Vec<usize> = (0..bows.len()).filter(|&i| !bows[i].is_zero()).collect();
    let skipped = bows.len() - usable.len();
    if skipped > 0 {
        log::warn!("{skipped} document(s) with an empty bag of words skipped");
    }
    if usable.is_empty() {
        return Err(Error::invalid("every bag-of-words vector is zero"));
    }

    let n_words = vocab.len() - NUM_SPECIALS;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = EncoderParams::init(n_words + context_dim, cfg.hidden, n_topics, &mut rng);
    let beta_dist = Normal::new(0.0, (2.0 / (n_topics + n_words) as f64).sqrt()).expect("std");
    let beta = Array2::from_shape_fn((n_topics, n_words), |_| beta_dist.sample(&mut rng));
    let mut params = ProdLdaParams { encoder, beta };
    let (prior_mu, prior_var) = laplace_prior(n_topics, 1.0 / n_topics as f64);

    let inputs: Vec<SparseInput> = (0..bows.len())
        .map(|i| encoder_input(&bows[i], vocab.len(), context.map(|c| c[i].as_slice())))
        .collect();

    let adam = AdamConfig { lr: cfg.lr, beta1: cfg.betas.0, beta2: cfg.betas.1, ..AdamConfig::default() };
    let mut state = AdamState::new(&params);
    let mut order = usable;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = params.zeros_like();
            for &i in batch {
                let noise: Vec<f64> = (0..n_topics).map(|_| StandardNormal.sample(&mut rng)).collect();
                epoch_loss += neg_elbo(
                    &params,
                    (&prior_mu, &prior_var),
                    &inputs[i],
                    &bows[i],
                    &noise,
                    Some(&mut grad),
                );
            }
            let scale = 1.0 / batch.len() as f64;
            for t in grad.tensors_mut() {
                t.iter_mut().for_each(|g| *g *= scale);
            }
            adam_step(&mut params, &grad, &mut state, &adam, 1.0)?;
        }
        let mean_elbo = -epoch_loss / order.len() as f64;
        if !mean_elbo.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        history.push(mean_elbo);
    }

    Ok(TopicModel {
        vocab: vocab.clone(),
        context_dim,
        encoder: params.encoder,
        beta: params.beta,
        prior_mu,
        prior_var,
        elbo_history: history,
    })
}
