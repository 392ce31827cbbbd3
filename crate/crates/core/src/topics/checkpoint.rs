//! Topic model file.
//!
//! ```text
//! "KXTP" u32 version | n_topics | context_dim | hidden | vocab words
//!   | encoder tensors | beta | prior mu | prior var | ELBO history
//!   | u32 has_history_encoder [| encoder tensors | MSE history]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EncoderParams, InferenceEncoder, TopicModel, TopicRouter};
use crate::binio::{Reader, Writer};
use crate::corpus::{Vocab, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::netcore::ParamTree;

pub const TOPIC_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"KXTP";

pub fn save_topics(path: &Path, router: &TopicRouter) -> Result<()> {
    let m = &router.model;
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.header(MAGIC, TOPIC_FORMAT_VERSION)?;
    w.usize(m.n_topics())?;
    w.usize(m.context_dim)?;
    w.usize(m.encoder.hidden())?;
    w.strings(m.vocab.words())?;
    for t in m.encoder.tensors() {
        w.floats(t)?;
    }
    w.floats(m.beta.as_slice().expect("standard layout"))?;
    w.floats(m.prior_mu.as_slice().expect("contiguous"))?;
    w.floats(m.prior_var.as_slice().expect("contiguous"))?;
    w.floats(&m.elbo_history)?;
    match &router.history_encoder {
        None => w.u32(0)?,
        Some(enc) => {
            w.u32(1)?;
            for t in enc.encoder.tensors() {
                w.floats(t)?;
            }
            w.floats(&enc.mse_history)?;
        }
    }
    w.finish()?;
    Ok(())
}

fn read_encoder<R: Read>(r: &mut Reader<R>, input: usize, hidden: usize, l: usize) -> Result<EncoderParams> {
    let mut enc = EncoderParams::init(input, hidden, l, &mut ChaCha8Rng::seed_from_u64(0));
    let names = enc.names();
    for (t, name) in enc.tensors_mut().into_iter().zip(names) {
        t.copy_from_slice(&r.floats_exact(t.len(), &name)?);
    }
    Ok(enc)
}

pub fn load_topics(path: &Path) -> Result<TopicRouter> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.header(MAGIC, TOPIC_FORMAT_VERSION)?;
    let l = r.usize()?;
    let context_dim = r.usize()?;
    let hidden = r.usize()?;
    if l < 2 || hidden == 0 {
        return Err(Error::BadCheckpoint(format!("invalid shape: {l} topics, hidden {hidden}")));
    }
    let vocab = Vocab::from_words(r.strings()?)?;
    let n_words = vocab.len() - NUM_SPECIALS;
    let encoder = read_encoder(&mut r, n_words + context_dim, hidden, l)?;
    let beta = Array2::from_shape_vec((l, n_words), r.floats_exact(l * n_words, "beta")?)
        .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
    let prior_mu = Array1::from(r.floats_exact(l, "prior_mu")?);
    let prior_var = Array1::from(r.floats_exact(l, "prior_var")?);
    let elbo_history = r.floats()?;
    let history_encoder = match r.u32()? {
        0 => None,
        1 => {
            let encoder = read_encoder(&mut r, n_words + context_dim, hidden, l)?;
            Some(InferenceEncoder { encoder, mse_history: r.floats()? })
        }
        other => return Err(Error::BadCheckpoint(format!("bad history-encoder flag {other}"))),
    };
    r.expect_eof()?;
    let model = TopicModel { vocab, context_dim, encoder, beta, prior_mu, prior_var, elbo_history };
    Ok(TopicRouter { model, history_encoder })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{bow_vector, build_vocab_filtered, gen_synthetic, SyntheticSpec, TokenFilter};
    use crate::topics::{train_inference_encoder, train_topic_model, AlignConfig, TopicTrainConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let data = gen_synthetic(&SyntheticSpec::new(2, 4, 8, 2, 1));
        let texts: Vec<String> = data.docs.iter().map(|d| d.text()).collect();
        let vocab = build_vocab_filtered(&texts, 100, TokenFilter::Content).unwrap();
        let bows: Vec<_> = texts.iter().map(|t| bow_vector(&vocab, t)).collect();
        let cfg = TopicTrainConfig { epochs: 2, hidden: 8, batch_size: 4, ..Default::default() };
        let model = train_topic_model(&vocab, &bows, None, 2, &cfg).unwrap();
        let pairs: Vec<_> = bows.iter().map(|b| (b.clone(), b.clone())).collect();
        let enc = train_inference_encoder(&model, &pairs, &AlignConfig { epochs: 1, ..Default::default() }).unwrap();

        let dir = tempfile::tempdir().unwrap();
        for router in [TopicRouter::new(model.clone(), None), TopicRouter::new(model, Some(enc))] {
            let a = dir.path().join("a.ckpt");
            let b = dir.path().join("b.ckpt");
            save_topics(&a, &router).unwrap();
            let loaded = load_topics(&a).unwrap();
            assert_eq!(loaded, router);
            save_topics(&b, &loaded).unwrap();
            assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        }
    }
}
