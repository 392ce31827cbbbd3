//! Retrieval-free knowledge-grounded dialogue.
//!
//! Knowledge lives in topic-specialized bottleneck adapters ("experts")
//! inserted after every block of a small decoder-only transformer. A
//! ProdLDA-style topic model clusters the knowledge corpus, each expert is
//! trained on its cluster rewritten as pseudo-conversations, and at inference
//! the dialogue history is routed to the experts by its topic distribution.
//!
//! Module map:
//!
//! - [`corpus`]: tokenization, vocabularies, bag-of-words, data files, synthetic data
//! - [`topics`]: neural topic model, history encoder alignment, routing weights
//! - [`netcore`]: transformer with adapter experts, loss and backprop
//! - [`dialogform`]: dialogue serialization and pseudo-conversation conversion
//! - [`trainer`]: Adam, expert training, task adaptation, the staged pipeline
//! - [`evalkit`]: greedy generation, perplexity, unigram F1, distinct-n
//! - [`latbench`]: TF-IDF baseline and the inference latency harness
//! - [`cli`]: the `knowexpert` command-line front end

pub mod cli;
pub mod corpus;
pub mod dialogform;
pub mod error;
pub mod evalkit;
pub mod latbench;
pub mod netcore;
pub mod topics;
pub mod trainer;

mod binio;

pub use error::{Error, Result};
