//! Text normalization, vocabularies, bag-of-words features, data files and
//! the synthetic clustered corpus used by tests and benchmarks.

mod io;
mod synthetic;
mod vocab;

pub use io::{
    read_corpus, read_dialogues, read_vocab, write_corpus, write_dialogues, write_vocab,
};
pub use synthetic::{gen_synthetic, DialogueSplits, SyntheticData, SyntheticSpec};
pub use vocab::{
    bow_vector, build_vocab, build_vocab_filtered, decode, encode, is_content_token, tokenize,
    BowVector, Special, TokenFilter, TokenSeq, Vocab, NUM_SPECIALS,
};

use serde::{Deserialize, Serialize};

/// Default cap for the language-model vocabulary.
pub const DEFAULT_LM_VOCAB_CAP: usize = 8000;
/// Default cap for the topic-model bag-of-words vocabulary.
pub const DEFAULT_BOW_VOCAB_CAP: usize = 20000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    System,
}

impl Role {
    pub fn type_id(self) -> u32 {
        match self {
            Role::User => 0,
            Role::System => 1,
        }
    }

    pub fn special(self) -> Special {
        match self {
            Role::User => Special::User,
            Role::System => Special::System,
        }
    }

    pub fn other(self) -> Role {
        match self {
            Role::User => Role::System,
            Role::System => Role::User,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self { role: Role::User, text: text.into() }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self { role: Role::System, text: text.into() }
    }
}

/// One document of the knowledge corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeDoc {
    pub doc_id: String,
    pub title: String,
    pub sentences: Vec<String>,
    /// Expert index, set once the topic model has assigned the document.
    pub cluster: Option<usize>,
}

impl KnowledgeDoc {
    pub fn text(&self) -> String {
        self.sentences.join(" ")
    }
}

/// A dialogue history (ending in a user turn) plus the system response to
/// generate.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueSample {
    pub turns: Vec<Turn>,
    pub target: String,
}

impl DialogueSample {
    pub fn new(turns: Vec<Turn>, target: impl Into<String>) -> crate::Result<Self> {
        let sample = Self { turns, target: target.into() };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> crate::Result<()> {
        match self.turns.last() {
            None => Err(crate::Error::invalid("dialogue has no history turns")),
            Some(t) if t.role != Role::User => Err(crate::Error::invalid(
                "last history turn before the target must be a user turn",
            )),
            Some(_) => Ok(()),
        }
    }

    /// History text only, as seen at inference time.
    pub fn history_text(&self) -> String {
        self.turns.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ")
    }

    /// History plus the gold response.
    pub fn full_text(&self) -> String {
        let mut s = self.history_text();
        s.push(' ');
        s.push_str(&self.target);
        s
    }
}
