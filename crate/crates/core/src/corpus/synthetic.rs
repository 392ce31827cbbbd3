use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DialogueSample, KnowledgeDoc, Turn};

/// Parameters of the synthetic clustered corpus.
///
/// Every cluster owns a private word list. A sentence is a run of consecutive
/// words from that list (wrapping around), so text is topical and each
/// token's successor is predictable within its cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub docs_per_cluster: usize,
    pub vocab_per_cluster: usize,
    pub sentences_per_doc: usize,
    pub seed: u64,
    /// Words per knowledge sentence and per dialogue response.
    pub sentence_len: usize,
    pub dialogues_per_cluster: usize,
}

impl SyntheticSpec {
    pub fn new(
        n_clusters: usize,
        docs_per_cluster: usize,
        vocab_per_cluster: usize,
        sentences_per_doc: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_clusters,
            docs_per_cluster,
            vocab_per_cluster,
            sentences_per_doc,
            seed,
            sentence_len: 6,
            dialogues_per_cluster: docs_per_cluster,
        }
    }

    pub fn with_sentence_len(mut self, n: usize) -> Self {
        self.sentence_len = n;
        self
    }

    pub fn with_dialogues_per_cluster(mut self, n: usize) -> Self {
        self.dialogues_per_cluster = n;
        self
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub docs: Vec<KnowledgeDoc>,
    /// Generator cluster of each document (ground truth, not a topic assignment).
    pub doc_labels: Vec<usize>,
    pub dialogues: Vec<DialogueSample>,
    pub dialogue_labels: Vec<usize>,
    /// Private word list of each cluster.
    pub cluster_words: Vec<Vec<String>>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn syllable_count() -> usize {
    CONSONANTS.len() * VOWELS.len()
}

fn digits_needed(n: usize) -> usize {
    let base = syllable_count();
    let mut width = 1;
    let mut span = base;
    while span < n {
        width += 1;
        span *= base;
    }
    width
}

fn push_syllables(out: &mut String, mut value: usize, width: usize) {
    let base = syllable_count();
    let mut syl = Vec::with_capacity(width);
    for _ in 0..width {
        syl.push(value % base);
        value /= base;
    }
    for s in syl.into_iter().rev() {
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
    }
}

/// Fixed-width pronounceable word for (cluster, index); distinct pairs give
/// distinct words.
fn word(cluster: usize, index: usize, cluster_width: usize, index_width: usize) -> String {
    let mut w = String::with_capacity(2 * (cluster_width + index_width));
    push_syllables(&mut w, cluster, cluster_width);
    push_syllables(&mut w, index, index_width);
    w
}

fn chain(words: &[String], start: usize, len: usize) -> Vec<&str> {
    (0..len).map(|j| words[(start + j) % words.len()].as_str()).collect()
}

fn sentence(words: &[String], start: usize, len: usize, end: char) -> String {
    let mut s = chain(words, start, len).join(" ");
    s.push(end);
    s
}

/// Train / seen-validation / unseen-validation dialogue split.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueSplits {
    pub train: Vec<DialogueSample>,
    pub valid_seen: Vec<DialogueSample>,
    pub valid_unseen: Vec<DialogueSample>,
}

impl SyntheticData {
    /// Dialogues of the last cluster form the unseen set (its documents stay
    /// in the corpus); every `valid_every`-th dialogue of the other clusters
    /// is held out as seen validation.
    pub fn dialogue_splits(&self, valid_every: usize) -> DialogueSplits {
        let last = self.cluster_words.len().saturating_sub(1);
        let every = valid_every.max(2);
        let mut out = DialogueSplits { train: vec![], valid_seen: vec![], valid_unseen: vec![] };
        let mut seen_count = 0usize;
        for (d, &c) in self.dialogues.iter().zip(&self.dialogue_labels) {
            if c == last && last > 0 {
                out.valid_unseen.push(d.clone());
            } else {
                seen_count += 1;
                if seen_count % every == 0 {
                    out.valid_seen.push(d.clone());
                } else {
                    out.train.push(d.clone());
                }
            }
        }
        out
    }
}

/// Deterministic clustered corpus and matching dialogues. Counts of zero
/// are treated as one.
pub fn gen_synthetic(spec: &SyntheticSpec) -> SyntheticData {
    let n_clusters = spec.n_clusters.max(1);
    let vocab = spec.vocab_per_cluster.max(1);
    let sent_len = spec.sentence_len.max(1);
    let cw = digits_needed(n_clusters);
    let iw = digits_needed(vocab);
    let cluster_words: Vec<Vec<String>> = (0..n_clusters)
        .map(|c| (0..vocab).map(|i| word(c, i, cw, iw)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut docs = Vec::new();
    let mut doc_labels = Vec::new();
    for (c, words) in cluster_words.iter().enumerate() {
        for k in 0..spec.docs_per_cluster.max(1) {
            let sentences = (0..spec.sentences_per_doc.max(1))
                .map(|_| sentence(words, rng.random_range(0..vocab), sent_len, '.'))
                .collect();
            docs.push(KnowledgeDoc {
                doc_id: format!("doc{:07}", docs.len()),
                title: format!("topic {c} article {k}"),
                sentences,
                cluster: None,
            });
            doc_labels.push(c);
        }
    }

    let prompt_len = (sent_len / 2).max(1);
    let mut dialogues = Vec::new();
    let mut dialogue_labels = Vec::new();
    for (c, words) in cluster_words.iter().enumerate() {
        for _ in 0..spec.dialogues_per_cluster {
            let mut turns = Vec::new();
            if rng.random_bool(0.5) {
                let s = rng.random_range(0..vocab);
                turns.push(Turn::user(sentence(words, s, prompt_len, '?')));
                turns.push(Turn::system(sentence(words, s + prompt_len, sent_len, '.')));
            }
            let s = rng.random_range(0..vocab);
            turns.push(Turn::user(sentence(words, s, prompt_len, '?')));
            let target = sentence(words, s + prompt_len, sent_len, '.');
            dialogues.push(DialogueSample { turns, target });
            dialogue_labels.push(c);
        }
    }

    SyntheticData { docs, doc_labels, dialogues, dialogue_labels, cluster_words }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::corpus::{is_content_token, tokenize};

    fn words_of(doc: &KnowledgeDoc) -> HashSet<String> {
        tokenize(&doc.text()).into_iter().filter(|t| is_content_token(t)).collect()
    }

    #[test]
    fn clusters_are_disjoint() {
        let data = gen_synthetic(&SyntheticSpec::new(2, 5, 10, 3, 1));
        assert_eq!(data.docs.len(), 10);
        let first: HashSet<String> = data.docs[..5].iter().flat_map(words_of).collect();
        let second: HashSet<String> = data.docs[5..].iter().flat_map(words_of).collect();
        assert!(first.is_disjoint(&second));
        assert_eq!(data.doc_labels, [0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn dialogue_splits_hold_out_last_cluster() {
        let data = gen_synthetic(&SyntheticSpec::new(3, 2, 10, 2, 4).with_dialogues_per_cluster(6));
        let s = data.dialogue_splits(3);
        assert_eq!(s.valid_unseen.len(), 6);
        assert_eq!(s.valid_seen.len(), 4);
        assert_eq!(s.train.len(), 8);
        let unseen: HashSet<String> = data.cluster_words[2].iter().cloned().collect();
        for d in s.train.iter().chain(&s.valid_seen) {
            assert!(tokenize(&d.full_text()).iter().all(|t| !unseen.contains(t)));
        }
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::new(3, 4, 7, 2, 42);
        let a = gen_synthetic(&spec);
        let b = gen_synthetic(&spec);
        assert_eq!(a.docs, b.docs);
        assert_eq!(a.dialogues, b.dialogues);
        let c = gen_synthetic(&SyntheticSpec { seed: 43, ..spec });
        assert_ne!(a.docs, c.docs);
    }

    #[test]
    fn minimal_spec() {
        let data = gen_synthetic(&SyntheticSpec::new(1, 1, 1, 1, 0));
        assert_eq!(data.docs.len(), 1);
        assert_eq!(data.docs[0].sentences.len(), 1);
    }

    #[test]
    fn dialogues_stay_in_cluster() {
        let data = gen_synthetic(&SyntheticSpec::new(3, 2, 12, 2, 9));
        for (d, &c) in data.dialogues.iter().zip(&data.dialogue_labels) {
            d.validate().unwrap();
            let own: HashSet<&String> = data.cluster_words[c].iter().collect();
            for tok in tokenize(&d.full_text()).iter().filter(|t| is_content_token(t)) {
                assert!(own.contains(tok), "{tok} not from cluster {c}");
            }
        }
    }

    #[test]
    fn words_unique_across_many_clusters() {
        let data = gen_synthetic(&SyntheticSpec::new(80, 1, 90, 1, 0));
        let all: HashSet<&String> = data.cluster_words.iter().flatten().collect();
        assert_eq!(all.len(), 80 * 90);
    }
}
