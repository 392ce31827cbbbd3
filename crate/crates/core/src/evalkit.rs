//! Greedy response generation and the automatic metrics: perplexity,
//! unigram F1 and corpus-level distinct-n.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{decode, tokenize, DialogueSample, Special, Turn, Vocab};
use crate::dialogform::{serialize_dialogue, serialize_history};
use crate::error::{Error, Result};
use crate::netcore::{self, ModelState, RoutingMode};
use crate::topics::{TopicRouter, TopicWeights};

/// Response length cap used for evaluation and benchmarking.
pub const DEFAULT_GEN_LEN: usize = 23;

/// How routing weights are obtained for a dialogue.
#[derive(Debug, Clone, Copy)]
pub enum Routing<'a> {
    /// Topic inference over the dialogue history.
    Topics(&'a TopicRouter),
    /// The same weights for every dialogue (e.g. a single expert probe).
    Fixed(&'a TopicWeights),
}

impl Routing<'_> {
    pub fn weights(&self, history: &[Turn]) -> Result<TopicWeights> {
        match self {
            Routing::Topics(r) => {
                let text = history.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ");
                r.route_history(&text)
            }
            Routing::Fixed(w) => Ok((*w).clone()),
        }
    }
}

/// Greedy decoding with fixed routing weights. Returns the generated token
/// ids, excluding the terminating `<eos>`.
pub fn generate_ids(
    model: &ModelState,
    vocab: &Vocab,
    history: &[Turn],
    w: &TopicWeights,
    mode: RoutingMode,
    max_len: usize,
) -> Result<Vec<u32>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut seq = serialize_history(history, vocab, model.config.max_seq_len, max_len)?;
    let mut out = Vec::with_capacity(max_len);
    for _ in 0..max_len {
        let logits = netcore::next_token_logits(model, &seq, w.as_slice(), mode)?;
        let next = netcore::argmax(logits.as_slice().expect("contiguous")) as u32;
        if next == Special::Eos.id() {
            break;
        }
        out.push(next);
        seq.push(next, crate::corpus::Role::System.type_id());
    }
    Ok(out)
}

/// Greedy response for a dialogue history, routed per `routing`.
pub fn generate(
    model: &ModelState,
    vocab: &Vocab,
    routing: Routing<'_>,
    history: &[Turn],
    mode: RoutingMode,
    max_len: usize,
) -> Result<String> {
    if history.is_empty() {
        return Err(Error::invalid("empty dialogue history"));
    }
    let w = routing.weights(history)?;
    let ids = generate_ids(model, vocab, history, &w, mode, max_len)?;
    Ok(decode(vocab, &ids))
}

/// Summed target NLL and token count for one dialogue.
pub fn dialogue_nll(
    model: &ModelState,
    vocab: &Vocab,
    sample: &DialogueSample,
    w: &TopicWeights,
    mode: RoutingMode,
) -> Result<(f64, usize)> {
    let ser = serialize_dialogue(sample, vocab, model.config.max_seq_len)?;
    let (targets, mask) = ser.next_token_targets();
    let logits = netcore::forward(model, &ser.input, w.as_slice(), mode)?;
    netcore::nll_sum(&logits, &targets, &mask)
}

/// Token-weighted dataset perplexity of the gold responses:
/// `exp(total NLL / total target tokens)`.
pub fn perplexity(
    model: &ModelState,
    vocab: &Vocab,
    routing: Routing<'_>,
    dataset: &[DialogueSample],
    mode: RoutingMode,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut total = 0.0;
    let mut count = 0;
    for sample in dataset {
        let w = routing.weights(&sample.turns)?;
        let (s, c) = dialogue_nll(model, vocab, sample, &w, mode)?;
        total += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((total / count as f64).exp())
}

/// Lowercase, drop ASCII punctuation, split on whitespace, drop articles.
pub fn normalize_for_f1(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Unigram F1 between a hypothesis and a reference after normalization.
pub fn unigram_f1(hypothesis: &str, reference: &str) -> f64 {
    let hyp = normalize_for_f1(hypothesis);
    let reference = normalize_for_f1(reference);
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for w in &reference {
        *ref_counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in &hyp {
        if let Some(c) = ref_counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Unique n-grams over total n-grams across all responses (0 when there are
/// none, or for `n == 0`).
pub fn distinct_n<S: AsRef<str>>(responses: &[S], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut unique: HashSet<Vec<String>> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        let toks = tokenize(r.as_ref());
        for gram in toks.windows(n) {
            unique.insert(gram.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    pub f1: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub history: Vec<Turn>,
    pub gold: String,
    pub hyp: String,
}

/// Mean F1 plus Dist-1/2 for a set of hypotheses against references.
pub fn score_generations<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> (f64, f64, f64) {
    let f1 = if hyps.is_empty() {
        0.0
    } else {
        hyps.iter().zip(refs).map(|(h, r)| unigram_f1(h.as_ref(), r.as_ref())).sum::<f64>()
            / hyps.len() as f64
    };
    (f1, distinct_n(hyps, 1), distinct_n(hyps, 2))
}

/// PPL on the gold targets, F1 and Dist-n on greedy generations.
pub fn evaluate(
    model: &ModelState,
    vocab: &Vocab,
    routing: Routing<'_>,
    dataset: &[DialogueSample],
    mode: RoutingMode,
    max_len: usize,
) -> Result<(EvalReport, Vec<GenerationRecord>)> {
    let ppl = perplexity(model, vocab, routing, dataset, mode)?;
    let mut records = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let hyp = generate(model, vocab, routing, &sample.turns, mode, max_len)?;
        records.push(GenerationRecord { history: sample.turns.clone(), gold: sample.target.clone(), hyp });
    }
    let hyps: Vec<&str> = records.iter().map(|r| r.hyp.as_str()).collect();
    let refs: Vec<&str> = records.iter().map(|r| r.gold.as_str()).collect();
    let (f1, dist1, dist2) = score_generations(&hyps, &refs);
    Ok((EvalReport { ppl, f1, dist1, dist2, n_samples: dataset.len() }, records))
}

/// Writes `eval_report.json` and `generations.jsonl` into `dir`.
pub fn write_eval(dir: &Path, report: &EvalReport, records: &[GenerationRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = BufWriter::new(File::create(dir.join("eval_report.json"))?);
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n")?;
    f.flush()?;
    let mut g = BufWriter::new(File::create(dir.join("generations.jsonl"))?);
    for r in records {
        serde_json::to_writer(&mut g, r)?;
        g.write_all(b"\n")?;
    }
    g.flush()?;
    Ok(())
}
