//! Versioned little-endian model files.
//!
//! ```text
//! model.ckpt    "KXMD" u32 version | config | vocab | "BKBN" backbone | "EXPT" experts
//! experts.ckpt  "KXEX" u32 version | config | "EXPT" experts
//! ```
//!
//! Tensors are written in `ParamTree::tensors()` order, each as a u64 length
//! followed by raw f64 values, so a load/save round trip is bit-exact. The
//! experts section is identical in both files, which lets stage outputs be
//! combined.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::{Expert, ModelState, ParamTree};
use super::ModelConfig;
use crate::binio::{Reader, Writer};
use crate::corpus::Vocab;
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MODEL_MAGIC: &[u8; 4] = b"KXMD";
const EXPERTS_MAGIC: &[u8; 4] = b"KXEX";

fn write_config<W: Write>(w: &mut Writer<W>, c: &ModelConfig) -> Result<()> {
    for v in [
        c.n_layers,
        c.n_heads,
        c.hidden,
        c.bottleneck,
        c.n_experts,
        c.vocab_size,
        c.max_seq_len,
        c.n_type_ids,
    ] {
        w.usize(v)?;
    }
    Ok(())
}

fn read_config<R: Read>(r: &mut Reader<R>) -> Result<ModelConfig> {
    let c = ModelConfig {
        n_layers: r.usize()?,
        n_heads: r.usize()?,
        hidden: r.usize()?,
        bottleneck: r.usize()?,
        n_experts: r.usize()?,
        vocab_size: r.usize()?,
        max_seq_len: r.usize()?,
        n_type_ids: r.usize()?,
    };
    c.validate().map_err(|e| Error::BadCheckpoint(e.to_string()))?;
    Ok(c)
}

fn write_tree<W: Write, T: ParamTree>(w: &mut Writer<W>, tree: &T) -> Result<()> {
    for t in tree.tensors() {
        w.floats(t)?;
    }
    Ok(())
}

fn read_tree<R: Read, T: ParamTree>(r: &mut Reader<R>, tree: &mut T, what: &str) -> Result<()> {
    let names = tree.names();
    for (t, name) in tree.tensors_mut().into_iter().zip(names) {
        let xs = r.floats_exact(t.len(), &format!("{what}.{name}"))?;
        t.copy_from_slice(&xs);
    }
    Ok(())
}

fn write_experts<W: Write>(w: &mut Writer<W>, experts: &[Expert]) -> Result<()> {
    w.tag(b"EXPT")?;
    w.usize(experts.len())?;
    for e in experts {
        write_tree(w, e)?;
    }
    Ok(())
}

fn read_experts<R: Read>(r: &mut Reader<R>, config: &ModelConfig) -> Result<Vec<Expert>> {
    r.expect_tag(b"EXPT")?;
    let n = r.usize()?;
    if n != config.n_experts {
        return Err(Error::BadCheckpoint(format!(
            "{n} experts stored, config says {}",
            config.n_experts
        )));
    }
    let mut experts = ModelState::init(config.clone(), 0)?.experts;
    for (l, e) in experts.iter_mut().enumerate() {
        read_tree(r, e, &format!("expert{l}"))?;
    }
    Ok(experts)
}

pub fn save_model(path: &Path, model: &ModelState, vocab: &Vocab) -> Result<()> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::invalid(format!(
            "vocabulary has {} entries, model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.header(MODEL_MAGIC, MODEL_FORMAT_VERSION)?;
    write_config(&mut w, &model.config)?;
    w.strings(vocab.words())?;
    w.tag(b"BKBN")?;
    write_tree(&mut w, &model.backbone)?;
    write_experts(&mut w, &model.experts)?;
    w.finish()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelState, Vocab)> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.header(MODEL_MAGIC, MODEL_FORMAT_VERSION)?;
    let config = read_config(&mut r)?;
    let vocab = Vocab::from_words(r.strings()?)?;
    if vocab.len() != config.vocab_size {
        return Err(Error::BadCheckpoint("vocabulary size disagrees with config".into()));
    }
    let mut model = ModelState::init(config.clone(), 0)?;
    r.expect_tag(b"BKBN")?;
    read_tree(&mut r, &mut model.backbone, "backbone")?;
    model.experts = read_experts(&mut r, &config)?;
    r.expect_eof()?;
    Ok((model, vocab))
}

pub fn save_experts(path: &Path, model: &ModelState) -> Result<()> {
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.header(EXPERTS_MAGIC, MODEL_FORMAT_VERSION)?;
    write_config(&mut w, &model.config)?;
    write_experts(&mut w, &model.experts)?;
    w.finish()?;
    Ok(())
}

/// Loads an experts file; its config must match `expected` exactly.
pub fn load_experts(path: &Path, expected: &ModelConfig) -> Result<Vec<Expert>> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.header(EXPERTS_MAGIC, MODEL_FORMAT_VERSION)?;
    let config = read_config(&mut r)?;
    if &config != expected {
        return Err(Error::BadCheckpoint(format!(
            "experts were trained for {config:?}, model is {expected:?}"
        )));
    }
    let experts = read_experts(&mut r, &config)?;
    r.expect_eof()?;
    Ok(experts)
}
