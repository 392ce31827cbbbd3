use std::collections::HashMap;

use crate::error::{Error, Result};

/// Reserved tokens. They occupy ids `0..NUM_SPECIALS` in every vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Special {
    Pad = 0,
    Bos = 1,
    Eos = 2,
    User = 3,
    System = 4,
    Unk = 5,
}

pub const NUM_SPECIALS: usize = 6;

impl Special {
    pub const ALL: [Special; NUM_SPECIALS] = [
        Special::Pad,
        Special::Bos,
        Special::Eos,
        Special::User,
        Special::System,
        Special::Unk,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn token(self) -> &'static str {
        match self {
            Special::Pad => "<pad>",
            Special::Bos => "<bos>",
            Special::Eos => "<eos>",
            Special::User => "<user>",
            Special::System => "<system>",
            Special::Unk => "<unk>",
        }
    }
}

/// Which tokens are eligible for a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenFilter {
    All,
    /// Drops punctuation tokens; used for bag-of-words vocabularies.
    Content,
}

impl TokenFilter {
    fn keeps(self, token: &str) -> bool {
        match self {
            TokenFilter::All => true,
            TokenFilter::Content => is_content_token(token),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from an ordered word list (specials excluded).
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = Special::ALL.iter().map(|s| s.token().to_string()).collect();
        let mut ids = HashMap::new();
        for (i, s) in all.iter().enumerate() {
            ids.insert(s.clone(), i as u32);
        }
        for w in words {
            if ids.contains_key(&w) {
                return Err(Error::invalid(format!("duplicate vocabulary entry {w:?}")));
            }
            ids.insert(w.clone(), all.len() as u32);
            all.push(w);
        }
        Ok(Self { words: all, ids })
    }

    /// Total size including specials.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() == NUM_SPECIALS
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn id_or_unk(&self, word: &str) -> u32 {
        self.id(word).unwrap_or(Special::Unk.id())
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Non-special words in id order.
    pub fn words(&self) -> &[String] {
        &self.words[NUM_SPECIALS..]
    }

    /// Every token including the specials block, indexed by id.
    pub fn all_tokens(&self) -> &[String] {
        &self.words
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }
}

/// A token-id sequence with one role/type id per token.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub type_ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>, type_ids: Vec<u32>) -> Result<Self> {
        if ids.len() != type_ids.len() {
            return Err(Error::dims(format!(
                "{} token ids vs {} type ids",
                ids.len(),
                type_ids.len()
            )));
        }
        Ok(Self { ids, type_ids })
    }

    /// All tokens with type id 0.
    pub fn untyped(ids: Vec<u32>) -> Self {
        let type_ids = vec![0; ids.len()];
        Self { ids, type_ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: u32, type_id: u32) {
        self.ids.push(id);
        self.type_ids.push(type_id);
    }
}

/// Lowercases, splits on whitespace and emits every non-alphanumeric,
/// non-whitespace character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// True unless the token is a single punctuation/symbol character.
pub fn is_content_token(token: &str) -> bool {
    token.chars().any(char::is_alphanumeric)
}

pub fn build_vocab<S: AsRef<str>>(texts: &[S], cap: usize) -> Result<Vocab> {
    build_vocab_filtered(texts, cap, TokenFilter::All)
}

/// Ranks tokens by descending frequency, ties lexicographic, and keeps as
/// many as fit in `cap` (which counts the specials block).
pub fn build_vocab_filtered<S: AsRef<str>>(
    texts: &[S],
    cap: usize,
    filter: TokenFilter,
) -> Result<Vocab> {
    if cap <= NUM_SPECIALS {
        return Err(Error::invalid(format!(
            "vocabulary cap {cap} must exceed the {NUM_SPECIALS} special tokens"
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for text in texts {
        for tok in tokenize(text.as_ref()) {
            if filter.keeps(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    // Specials are reserved; text that literally contains "<unk>" etc. is
    // split into punctuation and words anyway, so collisions cannot occur.
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(cap - NUM_SPECIALS);
    Vocab::from_words(ranked.into_iter().map(|(w, _)| w))
}

pub fn encode(vocab: &Vocab, text: &str) -> TokenSeq {
    TokenSeq::untyped(tokenize(text).iter().map(|t| vocab.id_or_unk(t)).collect())
}

/// Joins the token strings with single spaces. Specials other than UNK are
/// skipped.
pub fn decode(vocab: &Vocab, ids: &[u32]) -> String {
    ids.iter()
        .filter(|&&id| !Vocab::is_special(id) || id == Special::Unk.id())
        .filter_map(|&id| vocab.word(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sparse token counts keyed by vocabulary id, sorted by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BowVector {
    entries: Vec<(u32, f64)>,
}

impl BowVector {
    pub fn from_counts(mut entries: Vec<(u32, f64)>) -> Self {
        entries.sort_by_key(|e| e.0);
        entries.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        entries.retain(|e| e.1 != 0.0);
        Self { entries }
    }

    pub fn get(&self, id: u32) -> f64 {
        self.entries
            .binary_search_by_key(&id, |e| e.0)
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn l1(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    /// Dense feature vector over the non-special vocabulary
    /// (`vocab.len() - NUM_SPECIALS` entries).
    pub fn to_features(&self, vocab_len: usize) -> Vec<f64> {
        let mut v = vec![0.0; vocab_len - NUM_SPECIALS];
        for &(id, c) in &self.entries {
            v[id as usize - NUM_SPECIALS] = c;
        }
        v
    }
}

/// Counts in-vocabulary content tokens. Specials, UNK and punctuation are
/// not counted.
pub fn bow_vector(vocab: &Vocab, text: &str) -> BowVector {
    let mut counts: HashMap<u32, f64> = HashMap::new();
    for tok in tokenize(text) {
        if !is_content_token(&tok) {
            continue;
        }
        if let Some(id) = vocab.id(&tok) {
            if !Vocab::is_special(id) {
                *counts.entry(id).or_default() += 1.0;
            }
        }
    }
    BowVector::from_counts(counts.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &Vocab, words: &[&str]) -> Vec<u32> {
        words.iter().map(|w| v.id(w).unwrap()).collect()
    }

    #[test]
    fn frequency_order() {
        let v = build_vocab(&["a a b"], 8).unwrap();
        let a = v.id("a").unwrap();
        let b = v.id("b").unwrap();
        assert!(a < b);
        assert_eq!(v.words(), ["a", "b"]);
    }

    #[test]
    fn ties_are_lexicographic_and_cap_applies() {
        // y occurs twice, x and z once each; x wins the tie and z falls off.
        let v = build_vocab(&["x y", "y z"], NUM_SPECIALS + 2).unwrap();
        assert_eq!(v.words(), ["y", "x"]);
        assert_eq!(encode(&v, "z").ids, vec![Special::Unk.id()]);
    }

    #[test]
    fn empty_corpus() {
        assert!(matches!(build_vocab(&[""], 8), Err(Error::EmptyCorpus)));
        assert!(matches!(build_vocab::<&str>(&[], 8), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn cap_must_exceed_specials() {
        assert!(build_vocab(&["a"], NUM_SPECIALS).is_err());
    }

    #[test]
    fn specials_take_lowest_ids() {
        let v = build_vocab(&["q r s"], 100).unwrap();
        for s in Special::ALL {
            assert_eq!(v.word(s.id()), Some(s.token()));
        }
        assert!(v.words().iter().all(|w| v.id(w).unwrap() as usize >= NUM_SPECIALS));
    }

    #[test]
    fn normalization() {
        assert_eq!(tokenize("Hello, world"), ["hello", ",", "world"]);
        assert_eq!(tokenize("  Don't STOP!"), ["don", "'", "t", "stop", "!"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn encode_decode() {
        let v = build_vocab(&["hello , world a b"], 50).unwrap();
        let seq = encode(&v, "Hello, world");
        assert_eq!(seq.ids, ids(&v, &["hello", ",", "world"]));
        assert!(seq.type_ids.iter().all(|&t| t == 0));
        assert!(encode(&v, "").is_empty());
        assert_eq!(decode(&v, &encode(&v, "a b").ids), "a b");
        assert_eq!(decode(&v, &encode(&v, "Hello,world").ids), "hello , world");
    }

    #[test]
    fn bow_counts() {
        let v = build_vocab(&["a a b , x"], 50).unwrap();
        let bow = bow_vector(&v, "a a b");
        assert_eq!(bow.get(v.id("a").unwrap()), 2.0);
        assert_eq!(bow.get(v.id("b").unwrap()), 1.0);
        assert_eq!(bow.l1(), 3.0);

        assert!(bow_vector(&v, "zzz qqq").is_zero());

        let bow = bow_vector(&v, "a b a c");
        assert_eq!(bow.entries().len(), 2);
        assert_eq!(bow.get(v.id("a").unwrap()), 2.0);
        assert_eq!(bow.get(v.id("b").unwrap()), 1.0);

        // punctuation is never a content token
        assert!(bow_vector(&v, ", ,").is_zero());
    }

    #[test]
    fn content_filter() {
        let v = build_vocab_filtered(&["a , b ."], 50, TokenFilter::Content).unwrap();
        assert_eq!(v.words(), ["a", "b"]);
    }

    #[test]
    fn features_are_dense_over_words() {
        let v = build_vocab(&["a a b"], 50).unwrap();
        let f = bow_vector(&v, "b a a").to_features(v.len());
        assert_eq!(f, vec![2.0, 1.0]);
    }
}
