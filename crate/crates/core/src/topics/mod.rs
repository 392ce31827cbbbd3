//! Neural topic model (ProdLDA) over the knowledge corpus and topic-based
//! routing of dialogue histories to experts.
//!
//! The encoder maps a bag of words (plus an optional context vector) to a
//! logistic-normal posterior over `L` topics; the decoder reconstructs the
//! words through `softmax(theta . beta)`. At inference the posterior mean is
//! pushed through a softmax to give routing weights.

mod align;
mod checkpoint;
mod encoder;
mod prodlda;

pub use align::{train_inference_encoder, AlignConfig, AlignInit, InferenceEncoder};
pub use checkpoint::{load_topics, save_topics, TOPIC_FORMAT_VERSION};
pub use encoder::EncoderParams;
pub use prodlda::{laplace_prior, train_topic_model, ProdLdaParams, TopicTrainConfig};

use ndarray::{Array1, Array2};

use crate::corpus::{bow_vector, BowVector, Vocab};
use crate::error::{Error, Result};

pub(crate) fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// A probability vector over the `L` experts.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicWeights(Vec<f64>);

impl TopicWeights {
    /// Accepts a vector on the simplex (entries >= 0, sum within 1e-6 of 1).
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::invalid("empty topic weights"));
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::invalid("topic weights must be finite and non-negative"));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("topic weights sum to {sum}, not 1")));
        }
        Ok(Self(w))
    }

    /// Normalizes non-negative scores onto the simplex.
    pub fn normalized(scores: &[f64]) -> Result<Self> {
        let sum: f64 = scores.iter().sum();
        if !(sum > 0.0) || scores.iter().any(|x| *x < 0.0) {
            return Err(Error::invalid("scores must be non-negative with a positive sum"));
        }
        Self::new(scores.iter().map(|x| x / sum).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, i: usize) -> Self {
        Self(crate::netcore::indicator(n, i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicModel {
    /// Bag-of-words vocabulary the model was trained on.
    pub vocab: Vocab,
    /// Length of the optional context vector appended to the input (0 = none).
    pub context_dim: usize,
    pub encoder: EncoderParams,
    /// `L x V` topic-word weights.
    pub beta: Array2<f64>,
    pub prior_mu: Array1<f64>,
    pub prior_var: Array1<f64>,
    /// Mean ELBO per training epoch.
    pub elbo_history: Vec<f64>,
}

impl TopicModel {
    pub fn n_topics(&self) -> usize {
        self.beta.nrows()
    }

    pub fn bow(&self, text: &str) -> BowVector {
        bow_vector(&self.vocab, text)
    }

    /// Posterior mean for a bag of words.
    pub fn posterior_mean(&self, bow: &BowVector, context: Option<&[f64]>) -> Result<Array1<f64>> {
        let input = self.input(bow, context)?;
        Ok(self.encoder.forward(&input).0)
    }

    fn input(&self, bow: &BowVector, context: Option<&[f64]>) -> Result<encoder::SparseInput> {
        let zeros = vec![0.0; self.context_dim];
        let ctx = match context {
            Some(c) if c.len() != self.context_dim => {
                return Err(Error::dims(format!(
                    "context vector of length {}, model expects {}",
                    c.len(),
                    self.context_dim
                )))
            }
            Some(c) => Some(c),
            None if self.context_dim > 0 => Some(zeros.as_slice()),
            None => None,
        };
        Ok(prodlda::encoder_input(bow, self.vocab.len(), ctx))
    }
}

fn weights_from_mean(mu: &Array1<f64>) -> TopicWeights {
    TopicWeights(softmax(mu.as_slice().expect("contiguous")))
}

/// Routing weights `softmax(mu)` from the encoder mean. A zero bag of words
/// yields uniform weights.
pub fn infer_topics(model: &TopicModel, bow: &BowVector, context: Option<&[f64]>) -> Result<TopicWeights> {
    if bow.is_zero() {
        log::warn!("empty bag of words; falling back to uniform topic weights");
        return Ok(TopicWeights::uniform(model.n_topics()));
    }
    Ok(weights_from_mean(&model.posterior_mean(bow, context)?))
}

/// Expert with the largest weight; ties go to the lowest index.
pub fn assign_cluster(w: &TopicWeights) -> usize {
    crate::netcore::argmax(w.as_slice())
}

/// The `k` highest-weighted words of every topic (clipped to the
/// vocabulary size).
pub fn top_words(model: &TopicModel, k: usize) -> Vec<Vec<String>> {
    let words = model.vocab.words();
    model
        .beta
        .outer_iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.into_iter().take(k.min(row.len())).map(|i| words[i].clone()).collect()
        })
        .collect()
}

/// Fraction of items whose assigned cluster's majority label matches their
/// own label.
pub fn cluster_purity(assigned: &[usize], labels: &[usize]) -> f64 {
    if assigned.is_empty() {
        return 0.0;
    }
    let mut counts: std::collections::BTreeMap<usize, std::collections::BTreeMap<usize, usize>> =
        Default::default();
    for (&a, &l) in assigned.iter().zip(labels) {
        *counts.entry(a).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    majority as f64 / assigned.len() as f64
}

/// Topic model plus (optionally) the aligned history encoder: everything
/// needed to turn a dialogue history into routing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicRouter {
    pub model: TopicModel,
    pub history_encoder: Option<InferenceEncoder>,
}

impl TopicRouter {
    pub fn new(model: TopicModel, history_encoder: Option<InferenceEncoder>) -> Self {
        Self { model, history_encoder }
    }

    pub fn n_topics(&self) -> usize {
        self.model.n_topics()
    }

    /// Routing weights for a dialogue history (no response available).
    pub fn route_history(&self, history_text: &str) -> Result<TopicWeights> {
        let bow = self.model.bow(history_text);
        match &self.history_encoder {
            None => infer_topics(&self.model, &bow, None),
            Some(enc) => {
                if bow.is_zero() {
                    log::warn!("empty history bag of words; uniform topic weights");
                    return Ok(TopicWeights::uniform(self.n_topics()));
                }
                let input = self.model.input(&bow, None)?;
                Ok(weights_from_mean(&enc.encoder.forward(&input).0))
            }
        }
    }
}
