use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DialogueSample, KnowledgeDoc, Role, Special, Turn, Vocab, NUM_SPECIALS};
use crate::dialogform::split_sentences;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct DocRecord {
    doc_id: String,
    title: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    turns: Vec<Turn>,
}

fn parse_err(path: &Path, line: usize, message: impl ToString) -> Error {
    Error::Parse {
        location: format!("{}:{}", path.display(), line + 1),
        message: message.to_string(),
    }
}

fn lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = File::open(path)?;
    Ok(BufReader::new(file).lines().enumerate())
}

/// Reads a JSON-lines knowledge corpus. Documents whose text yields no
/// sentence are skipped with a warning.
pub fn read_corpus(path: &Path) -> Result<Vec<KnowledgeDoc>> {
    let mut docs = Vec::new();
    for (i, line) in lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocRecord = serde_json::from_str(&line).map_err(|e| parse_err(path, i, e))?;
        let sentences = split_sentences(&rec.text);
        if sentences.is_empty() {
            log::warn!("document {} has no text; skipped", rec.doc_id);
            continue;
        }
        docs.push(KnowledgeDoc { doc_id: rec.doc_id, title: rec.title, sentences, cluster: None });
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, docs: &[KnowledgeDoc]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in docs {
        let rec = DocRecord { doc_id: d.doc_id.clone(), title: d.title.clone(), text: d.text() };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads JSON-lines dialogues; the final turn of each record is the system
/// target.
pub fn read_dialogues(path: &Path) -> Result<Vec<DialogueSample>> {
    let mut out = Vec::new();
    for (i, line) in lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: DialogueRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(path, i, e))?;
        let target = match rec.turns.pop() {
            Some(t) if t.role == Role::System => t.text,
            Some(_) => return Err(parse_err(path, i, "final turn must be a system turn")),
            None => return Err(parse_err(path, i, "no turns")),
        };
        let sample = DialogueSample { turns: rec.turns, target };
        sample.validate().map_err(|e| parse_err(path, i, e))?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_dialogues(path: &Path, dialogues: &[DialogueSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in dialogues {
        let mut turns = d.turns.clone();
        turns.push(Turn::system(d.target.clone()));
        serde_json::to_writer(&mut w, &DialogueRecord { turns })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One token per line; the line index is the token id, so the file starts
/// with the specials block.
pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for tok in vocab.all_tokens() {
        writeln!(w, "{tok}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = std::fs::read_to_string(path)?;
    let tokens: Vec<&str> = text.lines().collect();
    if tokens.len() < NUM_SPECIALS {
        return Err(parse_err(path, tokens.len(), "truncated specials block"));
    }
    for (i, s) in Special::ALL.iter().enumerate() {
        if tokens[i] != s.token() {
            return Err(parse_err(path, i, format!("expected special {}", s.token())));
        }
    }
    Vocab::from_words(tokens[NUM_SPECIALS..].iter().map(|s| s.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        std::fs::write(
            &path,
            "{\"doc_id\":\"d1\",\"title\":\"Orcs\",\"text\":\"Orcs are beings. They live in Mordor!\"}\n\
             {\"doc_id\":\"d2\",\"title\":\"Empty\",\"text\":\"\"}\n",
        )
        .unwrap();
        let docs = read_corpus(&path).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].sentences, ["Orcs are beings.", "They live in Mordor!"]);

        let out = dir.path().join("out.jsonl");
        write_corpus(&out, &docs).unwrap();
        assert_eq!(read_corpus(&out).unwrap(), docs);
    }

    #[test]
    fn dialogue_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            r#"{"turns":[{"role":"user","text":"hi"},{"role":"system","text":"hello"}]}"#,
        )
        .unwrap();
        let ds = read_dialogues(&path).unwrap();
        assert_eq!(ds[0].turns, vec![Turn::user("hi")]);
        assert_eq!(ds[0].target, "hello");

        let out = dir.path().join("o.jsonl");
        write_dialogues(&out, &ds).unwrap();
        assert_eq!(read_dialogues(&out).unwrap(), ds);

        std::fs::write(&path, r#"{"turns":[{"role":"user","text":"hi"}]}"#).unwrap();
        assert!(matches!(read_dialogues(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn vocab_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(&["b a a , c"], 100).unwrap();
        write_vocab(&path, &v).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[v.id("a").unwrap() as usize], "a");
        assert_eq!(read_vocab(&path).unwrap(), v);
    }
}
