//! Dialogue serialization and conversion of knowledge documents into
//! pseudo-conversations.
//!
//! Both paths share one layout so expert training sees the same token
//! structure as task adaptation:
//!
//! ```text
//! <bos> <user> u1 ... <system> s1 ... <user> u2 ... <system> target ... <eos>
//! ```
//!
//! Type ids are 0 for user-side tokens (including `<bos>`) and 1 for
//! system-side tokens. The loss mask covers system target tokens and the
//! closing `<eos>`.

use rand::seq::index;
use rand::Rng;

use crate::corpus::{encode, DialogueSample, KnowledgeDoc, Role, Special, TokenSeq, Vocab};
use crate::error::{Error, Result};

/// Fraction of utterances shuffled when a document is turned into a
/// pseudo-conversation.
pub const DEFAULT_PERMUTE_RATIO: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedSample {
    pub input: TokenSeq,
    pub loss_mask: Vec<bool>,
}

impl SerializedSample {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    /// Next-token targets aligned with the input positions: position `t`
    /// predicts token `t + 1`. The final position has no target.
    pub fn next_token_targets(&self) -> (Vec<u32>, Vec<bool>) {
        let n = self.len();
        let mut targets = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        for t in 0..n {
            if t + 1 < n {
                targets.push(self.input.ids[t + 1]);
                mask.push(self.loss_mask[t + 1]);
            } else {
                targets.push(Special::Pad.id());
                mask.push(false);
            }
        }
        (targets, mask)
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Splits after `.`, `!` or `?` when followed by whitespace (or the end of
/// the text). Fragments are trimmed and empty ones dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = match chars.peek() {
                Some(&(_, next)) => next.is_whitespace(),
                None => true,
            };
            if at_boundary {
                let end = i + c.len_utf8();
                let frag = text[start..end].trim();
                if !frag.is_empty() {
                    out.push(frag.to_string());
                }
                start = end;
            }
        }
    }
    let rest = text[start..].trim();
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out
}

/// Selects `floor(ratio * n)` positions uniformly without replacement and
/// swaps them pairwise with their nearest selected neighbour.
///
/// Pairing is greedy: among the remaining selected positions (in positional
/// order), the adjacent pair with the smallest gap is swapped first, ties
/// going to the earlier pair. With an odd count the last unpaired position
/// stays put.
pub fn permute_utterances<T: Clone, R: Rng + ?Sized>(
    utts: &[T],
    ratio: f64,
    rng: &mut R,
) -> Result<Vec<T>> {
    let order = permutation_indices(utts.len(), ratio, rng)?;
    Ok(order.into_iter().map(|i| utts[i].clone()).collect())
}

/// Index form of [`permute_utterances`]: `out[p]` is the source position of
/// the item placed at `p`.
pub fn permutation_indices<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("permutation ratio {ratio} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // The epsilon keeps e.g. 0.29 * 100 from flooring to 28.
    let k = ((ratio * n as f64) + 1e-9).floor() as usize;
    let k = k.min(n);
    if k < 2 {
        // a single selected utterance has no partner
        return Ok(order);
    }
    let mut selected = index::sample(rng, n, k).into_vec();
    selected.sort_unstable();
    while selected.len() >= 2 {
        let (best, _) = selected
            .windows(2)
            .enumerate()
            .min_by_key(|(i, w)| (w[1] - w[0], *i))
            .expect("at least one window");
        let (a, b) = (selected[best], selected[best + 1]);
        order.swap(a, b);
        selected.drain(best..best + 2);
    }
    Ok(order)
}

/// A pseudo-conversation view of one knowledge document.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoDialogue {
    pub sample: SerializedSample,
    /// Original sentence indices that act as (masked) system utterances.
    pub system_sentences: Vec<usize>,
}

/// Converts a document into role-alternating pseudo-conversations.
///
/// Sentences are permuted once, then two views are produced over the same
/// order: view A makes the final sentence (and every second one before it) a
/// system utterance, view B the remaining ones, so each sentence is a system
/// target in exactly one view. A view with no system sentence is dropped,
/// and a trailing user utterance is cut since nothing after it is scored.
/// Conversations longer than `max_len` tokens are split into consecutive
/// chunks.
pub fn to_pseudo_dialogues<R: Rng + ?Sized>(
    doc: &KnowledgeDoc,
    vocab: &Vocab,
    ratio: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<PseudoDialogue>> {
    if doc.sentences.is_empty() {
        return Err(Error::invalid(format!("document {} has no sentences", doc.doc_id)));
    }
    if max_len < 4 {
        return Err(Error::invalid("max_len too small for a pseudo-conversation"));
    }
    let n = doc.sentences.len();
    let order = permutation_indices(n, ratio, rng)?;
    let encoded: Vec<Vec<u32>> = doc.sentences.iter().map(|s| encode(vocab, s).ids).collect();

    let mut views = Vec::new();
    for last_parity_is_system in [true, false] {
        let utts: Vec<(Role, usize)> = (0..n)
            .map(|p| {
                let system = ((n - 1 - p) % 2 == 0) == last_parity_is_system;
                (if system { Role::System } else { Role::User }, order[p])
            })
            .collect();
        for chunk in chunk_utterances(&utts, &encoded, max_len) {
            let system_sentences: Vec<usize> =
                chunk.iter().filter(|u| u.0 == Role::System).map(|u| u.1).collect();
            if system_sentences.is_empty() {
                continue;
            }
            let mut b = Builder::new();
            for &(role, s) in &chunk {
                let budget = max_len - 3;
                let toks = &encoded[s];
                let toks = &toks[..toks.len().min(budget)];
                b.turn(role, toks, role == Role::System);
            }
            b.eos();
            views.push(PseudoDialogue { sample: b.finish(), system_sentences });
        }
    }
    Ok(views)
}

/// Greedy chunks that fit `max_len` once serialized, each ending on a
/// system utterance.
fn chunk_utterances(
    utts: &[(Role, usize)],
    encoded: &[Vec<u32>],
    max_len: usize,
) -> Vec<Vec<(Role, usize)>> {
    let cost = |s: usize| 1 + encoded[s].len().min(max_len - 3);
    let mut chunks = Vec::new();
    let mut cur: Vec<(Role, usize)> = Vec::new();
    let mut used = 2; // <bos> and <eos>
    for &u in utts {
        if !cur.is_empty() && used + cost(u.1) > max_len {
            chunks.push(std::mem::take(&mut cur));
            used = 2;
        }
        used += cost(u.1);
        cur.push(u);
    }
    if !cur.is_empty() {
        chunks.push(cur);
    }
    for c in &mut chunks {
        while c.last().is_some_and(|u| u.0 == Role::User) {
            c.pop();
        }
    }
    chunks.retain(|c| !c.is_empty());
    chunks
}

struct Builder {
    seq: TokenSeq,
    mask: Vec<bool>,
}

impl Builder {
    fn new() -> Self {
        let mut b = Self { seq: TokenSeq::default(), mask: Vec::new() };
        b.push(Special::Bos.id(), Role::User, false);
        b
    }

    fn push(&mut self, id: u32, role: Role, masked: bool) {
        self.seq.push(id, role.type_id());
        self.mask.push(masked);
    }

    fn turn(&mut self, role: Role, tokens: &[u32], masked: bool) {
        self.push(role.special().id(), role, false);
        for &t in tokens {
            self.push(t, role, masked);
        }
    }

    fn eos(&mut self) {
        self.push(Special::Eos.id(), Role::System, true);
    }

    fn finish(self) -> SerializedSample {
        SerializedSample { input: self.seq, loss_mask: self.mask }
    }
}

/// History-only prefix ending with the `<system>` token that opens the
/// response, truncated to leave `reserve` positions free.
pub fn serialize_history(
    turns: &[crate::corpus::Turn],
    vocab: &Vocab,
    max_seq_len: usize,
    reserve: usize,
) -> Result<TokenSeq> {
    if turns.is_empty() {
        return Err(Error::invalid("empty dialogue history"));
    }
    // <bos> ... <system> plus the reserved tail
    let fixed = 2 + reserve;
    if fixed > max_seq_len {
        return Err(Error::SequenceTooLong { len: fixed, max: max_seq_len });
    }
    let b = history_builder(turns, vocab, max_seq_len - fixed);
    let mut seq = b.finish().input;
    seq.push(Special::System.id(), Role::System.type_id());
    Ok(seq)
}

fn history_builder(turns: &[crate::corpus::Turn], vocab: &Vocab, budget: usize) -> Builder {
    let encoded: Vec<Vec<u32>> = turns.iter().map(|t| encode(vocab, &t.text).ids).collect();
    // Keep the most recent turns that fit; each turn costs its role token.
    let mut used = 0;
    let mut first = turns.len();
    while first > 0 && used + 1 + encoded[first - 1].len() <= budget {
        used += 1 + encoded[first - 1].len();
        first -= 1;
    }
    let mut b = Builder::new();
    if first == turns.len() && budget > 1 {
        // Not even the latest turn fits whole: keep its tail.
        let last = &encoded[turns.len() - 1];
        let keep = budget - 1;
        b.turn(turns[turns.len() - 1].role, &last[last.len() - keep..], false);
        return b;
    }
    for (t, toks) in turns[first..].iter().zip(&encoded[first..]) {
        b.turn(t.role, toks, false);
    }
    b
}

/// Serializes a dialogue for training or scoring. The oldest turns are
/// dropped when the sample would exceed `max_seq_len`; the target is never
/// truncated.
pub fn serialize_dialogue(
    sample: &DialogueSample,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<SerializedSample> {
    sample.validate()?;
    let target = encode(vocab, &sample.target).ids;
    // <bos> <system> target <eos>
    let fixed = target.len() + 3;
    if fixed > max_seq_len {
        return Err(Error::SequenceTooLong { len: fixed, max: max_seq_len });
    }
    let mut b = history_builder(&sample.turns, vocab, max_seq_len - fixed);
    b.turn(Role::System, &target, true);
    b.eos();
    Ok(b.finish())
}
