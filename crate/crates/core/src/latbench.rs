//! Inference-latency comparison: topic routing (constant cost) against
//! TF-IDF retrieval (cost linear in corpus size).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    gen_synthetic, is_content_token, tokenize, KnowledgeDoc, Role, SyntheticSpec, Turn, Vocab,
};
use crate::dialogform::serialize_history;
use crate::error::{Error, Result};
use crate::evalkit::DEFAULT_GEN_LEN;
use crate::netcore::{self, argmax, ModelState, RoutingMode};
use crate::topics::TopicRouter;

/// Sparse tf-idf document index scanned linearly on every query.
#[derive(Debug)]
pub struct TfidfIndex {
    terms: HashMap<String, usize>,
    idf: Vec<f64>,
    /// Per document: (term, tf * idf) sorted by term.
    vectors: Vec<Vec<(usize, f64)>>,
    norms: Vec<f64>,
    doc_ids: Vec<String>,
    scans: AtomicU64,
}

fn term_counts(text: &str) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for tok in tokenize(text) {
        if is_content_token(&tok) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    counts
}

/// Builds the index with raw term counts and `idf = ln(N / df)`.
pub fn build_tfidf_index(docs: &[KnowledgeDoc]) -> Result<TfidfIndex> {
    let counts: Vec<HashMap<String, usize>> = docs.iter().map(|d| term_counts(&d.text())).collect();
    if counts.iter().all(HashMap::is_empty) {
        return Err(Error::EmptyCorpus);
    }
    let mut vocab: Vec<&String> = counts.iter().flat_map(|c| c.keys()).collect();
    vocab.sort();
    vocab.dedup();
    let terms: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, t)| ((*t).clone(), i)).collect();
    let mut df = vec![0usize; terms.len()];
    for c in &counts {
        for t in c.keys() {
            df[terms[t]] += 1;
        }
    }
    let n = docs.len() as f64;
    let idf: Vec<f64> = df.iter().map(|&d| (n / d as f64).ln()).collect();
    let mut vectors = Vec::with_capacity(docs.len());
    let mut norms = Vec::with_capacity(docs.len());
    for c in &counts {
        let mut v: Vec<(usize, f64)> = c.iter().map(|(t, &k)| (terms[t], k as f64 * idf[terms[t]])).collect();
        v.sort_by_key(|e| e.0);
        norms.push(v.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt());
        vectors.push(v);
    }
    Ok(TfidfIndex {
        terms,
        idf,
        vectors,
        norms,
        doc_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
        scans: AtomicU64::new(0),
    })
}

impl TfidfIndex {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.terms.get(term).map(|&i| self.idf[i])
    }

    pub fn doc_id(&self, index: usize) -> &str {
        &self.doc_ids[index]
    }

    /// Number of full scans served so far.
    pub fn scans(&self) -> u64 {
        self.scans.load(Ordering::Relaxed)
    }

    fn query_vector(&self, query: &str) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = term_counts(query)
            .into_iter()
            .filter_map(|(t, k)| self.terms.get(&t).map(|&i| (i, k as f64 * self.idf[i])))
            .collect();
        v.sort_by_key(|e| e.0);
        v
    }

    /// Cosine similarity of `query` against every document, in corpus order.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        self.scans.fetch_add(1, Ordering::Relaxed);
        let q = self.query_vector(query);
        let qn = q.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
        self.vectors
            .iter()
            .zip(&self.norms)
            .map(|(d, &dn)| {
                if qn == 0.0 || dn == 0.0 {
                    return 0.0;
                }
                let (mut i, mut j, mut dot) = (0, 0, 0.0);
                while i < q.len() && j < d.len() {
                    match q[i].0.cmp(&d[j].0) {
                        std::cmp::Ordering::Less => i += 1,
                        std::cmp::Ordering::Greater => j += 1,
                        std::cmp::Ordering::Equal => {
                            dot += q[i].1 * d[j].1;
                            i += 1;
                            j += 1;
                        }
                    }
                }
                dot / (qn * dn)
            })
            .collect()
    }

    /// The `k` best documents as (corpus index, cosine), highest first and
    /// ties broken by lower index.
    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let mut ranked: Vec<(usize, f64)> = self.scores(query).into_iter().enumerate().collect();
        let by_rank = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        let k = k.min(ranked.len());
        if k < ranked.len() {
            ranked.select_nth_unstable_by(k - 1, by_rank);
            ranked.truncate(k);
        }
        ranked.sort_by(by_rank);
        Ok(ranked)
    }
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..20 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

fn check_timer() -> Result<()> {
    let res = timer_resolution();
    if res > Duration::from_millis(1) {
        return Err(Error::TimerResolution(res));
    }
    Ok(())
}

/// Greedy decoding of exactly `gen_len` tokens (no early stop at `<eos>`),
/// so both pipelines do the same amount of generation work.
fn generate_fixed(
    model: &ModelState,
    vocab: &Vocab,
    history: &[Turn],
    w: &[f64],
    mode: RoutingMode,
    gen_len: usize,
) -> Result<usize> {
    let mut seq = serialize_history(history, vocab, model.config.max_seq_len, gen_len)?;
    for _ in 0..gen_len {
        let logits = netcore::next_token_logits(model, &seq, w, mode)?;
        let next = argmax(logits.as_slice().expect("contiguous")) as u32;
        seq.push(next, Role::System.type_id());
    }
    Ok(seq.len())
}

/// (lookup, generation) wall-clock of the topic-routed pipeline for one
/// history. Takes no corpus or index.
pub fn time_knowexpert(
    model: &ModelState,
    vocab: &Vocab,
    router: &TopicRouter,
    history: &[Turn],
    gen_len: usize,
) -> Result<(Duration, Duration)> {
    let text = history.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ");
    let t0 = Instant::now();
    let w = router.route_history(&text)?;
    let t1 = Instant::now();
    generate_fixed(model, vocab, history, w.as_slice(), RoutingMode::Weighted, gen_len)?;
    Ok((t1 - t0, t1.elapsed()))
}

/// (lookup, generation) wall-clock of retrieve-then-generate: the top-1
/// document is prepended to the history and the oldest context is truncated
/// to fit.
pub fn time_retrieval(
    model: &ModelState,
    vocab: &Vocab,
    index: &TfidfIndex,
    docs: &[KnowledgeDoc],
    history: &[Turn],
    gen_len: usize,
) -> Result<(Duration, Duration)> {
    let text = history.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ");
    let t0 = Instant::now();
    let top = index.retrieve(&text, 1)?;
    let t1 = Instant::now();
    let mut turns = Vec::with_capacity(history.len() + 1);
    turns.push(Turn::user(docs[top[0].0].text()));
    turns.extend_from_slice(history);
    generate_fixed(model, vocab, &turns, &[], RoutingMode::NoExpert, gen_len)?;
    Ok((t1 - t0, t1.elapsed()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub n_samples: usize,
    pub trials: usize,
    pub gen_len: usize,
    pub seed: u64,
    pub n_clusters: usize,
    pub vocab_per_cluster: usize,
    pub sentences_per_doc: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1_000, 10_000, 100_000],
            n_samples: 100,
            trials: 10,
            gen_len: DEFAULT_GEN_LEN,
            seed: 0,
            n_clusters: 4,
            vocab_per_cluster: 50,
            sentences_per_doc: 5,
        }
    }
}

impl BenchConfig {
    /// Synthetic corpus spec for `size` documents (rounded up to a multiple
    /// of the cluster count).
    pub fn corpus_spec(&self, size: usize) -> SyntheticSpec {
        SyntheticSpec::new(
            self.n_clusters,
            size.div_ceil(self.n_clusters),
            self.vocab_per_cluster,
            self.sentences_per_doc,
            self.seed,
        )
        .with_dialogues_per_cluster(self.n_samples.div_ceil(self.n_clusters))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub corpus_size: usize,
    pub trials: usize,
    /// Seconds for all samples of one trial, averaged over trials.
    pub mean_s: f64,
    pub stdev_s: f64,
    pub lookup_s: f64,
    pub gen_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub note: String,
    pub n_samples: usize,
    pub gen_len: usize,
    pub timer_resolution_ns: u128,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, method: &str, size: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method && r.corpus_size == size)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::trainer::pipeline::write_json(path, self)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "method,corpus_size,mean_s,stdev_s,lookup_s,gen_s")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{},{},{}", r.method, r.corpus_size, r.mean_s, r.stdev_s, r.lookup_s, r.gen_s)?;
        }
        f.flush()?;
        Ok(())
    }
}

fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Runs both pipelines on the same query histories for every corpus size.
/// Each method/size gets one discarded warm-up trial plus `trials` timed
/// ones.
pub fn run_bench(model: &ModelState, vocab: &Vocab, router: &TopicRouter, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.trials == 0 || cfg.n_samples == 0 || cfg.gen_len == 0 || cfg.sizes.is_empty() {
        return Err(Error::invalid("bench needs at least one size, trial, sample and generated token"));
    }
    check_timer()?;
    let queries: Vec<Vec<Turn>> = {
        let data = gen_synthetic(&cfg.corpus_spec(cfg.n_clusters));
        data.dialogues.into_iter().map(|d| d.turns).cycle().take(cfg.n_samples).collect()
    };
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        let docs = gen_synthetic(&cfg.corpus_spec(size)).docs;
        let index = build_tfidf_index(&docs)?;
        log::info!("bench: corpus of {} docs", docs.len());

        let mut run = |method: &str, f: &mut dyn FnMut(&[Turn]) -> Result<(Duration, Duration)>| -> Result<()> {
            let mut totals = Vec::with_capacity(cfg.trials);
            let (mut lookup, mut gen) = (0.0, 0.0);
            for trial in 0..=cfg.trials {
                let (mut l, mut g) = (Duration::ZERO, Duration::ZERO);
                for q in &queries {
                    let (a, b) = f(q)?;
                    l += a;
                    g += b;
                }
                if trial > 0 {
                    totals.push((l + g).as_secs_f64());
                    lookup += l.as_secs_f64();
                    gen += g.as_secs_f64();
                }
            }
            let (mean_s, stdev_s) = mean_stdev(&totals);
            let t = cfg.trials as f64;
            rows.push(BenchRow {
                method: method.into(),
                corpus_size: size,
                trials: cfg.trials,
                mean_s,
                stdev_s,
                lookup_s: lookup / t,
                gen_s: gen / t,
            });
            Ok(())
        };
        run("tfidf", &mut |q| time_retrieval(model, vocab, &index, &docs, q, cfg.gen_len))?;
        let scans = index.scans();
        run("knowexpert", &mut |q| time_knowexpert(model, vocab, router, q, cfg.gen_len))?;
        debug_assert_eq!(index.scans(), scans);
    }
    Ok(BenchReport {
        note: "all methods timed on this machine, single thread".into(),
        n_samples: cfg.n_samples,
        gen_len: cfg.gen_len,
        timer_resolution_ns: timer_resolution().as_nanos(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str) -> KnowledgeDoc {
        KnowledgeDoc { doc_id: id.into(), title: String::new(), sentences: vec![text.into()], cluster: None }
    }

    #[test]
    fn single_doc_has_zero_idf_and_is_returned() {
        let idx = build_tfidf_index(&[doc("d0", "red fox jumps")]).unwrap();
        assert_eq!(idx.idf("fox"), Some(0.0));
        assert_eq!(idx.retrieve("red fox", 1).unwrap()[0].0, 0);
    }

    #[test]
    fn hand_computed_ranking() {
        // idf: apple ln(3/2), banana ln3, cherry ln(3/2), date ln3
        let docs = [doc("a", "apple banana"), doc("b", "apple cherry cherry"), doc("c", "cherry date")];
        let idx = build_tfidf_index(&docs).unwrap();
        let (l32, l3) = ((1.5f64).ln(), 3f64.ln());
        assert!((idx.idf("apple").unwrap() - l32).abs() < 1e-12);
        assert!((idx.idf("banana").unwrap() - l3).abs() < 1e-12);
        // query "cherry": doc b = 2*l32 / (|b| * l32), doc c = l32 / (|c| * l32)
        let nb = (l32 * l32 + 4.0 * l32 * l32).sqrt();
        let nc = (l32 * l32 + l3 * l3).sqrt();
        let s = idx.scores("cherry");
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 2.0 * l32 * l32 / (l32 * nb)).abs() < 1e-12);
        assert!((s[2] - l32 * l32 / (l32 * nc)).abs() < 1e-12);
        let top = idx.retrieve("cherry", 3).unwrap();
        let expect_b_first = 2.0 / nb > 1.0 / nc;
        assert_eq!(top[0].0, if expect_b_first { 1 } else { 2 });
    }

    #[test]
    fn ubiquitous_term_contributes_nothing() {
        let docs = [doc("a", "the cat"), doc("b", "the dog"), doc("c", "the eel")];
        let idx = build_tfidf_index(&docs).unwrap();
        assert_eq!(idx.idf("the"), Some(0.0));
        assert!(idx.scores("the").iter().all(|&s| s == 0.0));
    }

    #[test]
    fn retrieval_rules() {
        let docs = [doc("a", "one two"), doc("b", "three four"), doc("c", "five six")];
        let idx = build_tfidf_index(&docs).unwrap();
        assert_eq!(idx.retrieve("three four", 1).unwrap()[0].0, 1);
        let all = idx.retrieve("zebra", 10).unwrap();
        assert_eq!(all.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(all.iter().all(|r| r.1 == 0.0));
        assert!(idx.retrieve("one", 0).is_err());
        assert_eq!(idx.retrieve("one", 2).unwrap().len(), 2);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(build_tfidf_index(&[doc("a", "?!")]).is_err());
        assert!(build_tfidf_index(&[]).is_err());
    }

    #[test]
    fn clock_is_fine_grained() {
        assert!(timer_resolution() <= Duration::from_millis(1));
    }
}
