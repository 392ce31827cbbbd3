//! Resumable three-stage pipeline over a fixed artifact directory.
//!
//! ```text
//! <root>/topic.ckpt  clusters.jsonl  top_words.txt       stage 1
//! <root>/experts.ckpt  base_model.ckpt                   stage 2
//! <root>/model.ckpt                                      stage 3
//! <root>/reports/{topics,experts,report,adapt_timing}.json
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, DialogueSample, KnowledgeDoc, Vocab};
use crate::error::{Error, Result};
use crate::evalkit::Routing;
use crate::netcore::{self, ModelState};
use crate::topics::{
    self, assign_cluster, infer_topics, top_words, train_inference_encoder, train_topic_model, TopicRouter,
    TopicWeights,
};
use crate::trainer::{adapt_task, train_experts, ExpertReport, PipelineConfig, RunReport};

/// Number of words listed per topic in `top_words.txt`.
pub const TOP_WORDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactLayout {
    pub root: PathBuf,
}

impl ArtifactLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn topic_ckpt(&self) -> PathBuf {
        self.root.join("topic.ckpt")
    }
    pub fn clusters(&self) -> PathBuf {
        self.root.join("clusters.jsonl")
    }
    pub fn top_words(&self) -> PathBuf {
        self.root.join("top_words.txt")
    }
    pub fn experts_ckpt(&self) -> PathBuf {
        self.root.join("experts.ckpt")
    }
    /// Backbone plus trained experts, before task adaptation.
    pub fn base_model(&self) -> PathBuf {
        self.root.join("base_model.ckpt")
    }
    pub fn model_ckpt(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn report_json(&self) -> PathBuf {
        self.reports().join("report.json")
    }

    /// Outputs of stage `s` (1-based).
    pub fn stage_outputs(&self, s: usize) -> Vec<PathBuf> {
        match s {
            1 => vec![self.topic_ckpt(), self.clusters(), self.top_words()],
            2 => vec![self.experts_ckpt(), self.base_model()],
            3 => vec![self.model_ckpt(), self.report_json()],
            _ => vec![],
        }
    }

    fn stage_complete(&self, s: usize) -> bool {
        self.stage_outputs(s).iter().all(|p| p.is_file())
    }
}

/// Returns `path` if it exists, otherwise an error naming it.
pub fn require(path: &Path) -> Result<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path.display().to_string()))
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicsReport {
    pub n_docs: usize,
    pub n_topics: usize,
    pub elbo_history: Vec<f64>,
    /// Alignment MSE (initial, then per epoch); empty if alignment was skipped.
    pub align_mse: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct ClusterLine<'a> {
    doc_id: &'a str,
    cluster: usize,
    weights: &'a [f64],
}

/// Stage (i): topic model over the corpus, then (when `dialogues` is
/// non-empty and `align.epochs > 0`) the history encoder.
pub fn train_topics_stage(
    docs: &[KnowledgeDoc],
    dialogues: &[DialogueSample],
    cfg: &PipelineConfig,
) -> Result<(TopicRouter, TopicsReport)> {
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let texts: Vec<String> = docs.iter().map(KnowledgeDoc::text).collect();
    let bow_vocab = crate::corpus::build_vocab_filtered(&texts, cfg.bow_vocab_cap, crate::corpus::TokenFilter::Content)?;
    let bows: Vec<_> = texts.iter().map(|t| crate::corpus::bow_vector(&bow_vocab, t)).collect();
    let model = train_topic_model(&bow_vocab, &bows, None, cfg.n_clusters, &cfg.topic_train_config())?;

    let mut align_mse = Vec::new();
    let encoder = if !dialogues.is_empty() && cfg.align.epochs > 0 {
        let pairs: Vec<_> =
            dialogues.iter().map(|d| (model.bow(&d.history_text()), model.bow(&d.full_text()))).collect();
        let enc = train_inference_encoder(&model, &pairs, &cfg.align_config())?;
        align_mse = enc.mse_history.clone();
        Some(enc)
    } else {
        None
    };
    let elbo_history = model.elbo_history.clone();
    let router = TopicRouter::new(model, encoder);
    let assigned = assign_docs(&router, docs)?;
    let mut cluster_sizes = vec![0; router.n_topics()];
    for (c, _) in &assigned {
        cluster_sizes[*c] += 1;
    }
    let report = TopicsReport { n_docs: docs.len(), n_topics: router.n_topics(), elbo_history, align_mse, cluster_sizes };
    Ok((router, report))
}

/// Topic weights and cluster of each document under the topic model.
pub fn assign_docs(router: &TopicRouter, docs: &[KnowledgeDoc]) -> Result<Vec<(usize, TopicWeights)>> {
    docs.iter()
        .map(|d| {
            let w = infer_topics(&router.model, &router.model.bow(&d.text()), None)?;
            Ok((assign_cluster(&w), w))
        })
        .collect()
}

/// Writes `topic.ckpt`, `clusters.jsonl`, `top_words.txt` and
/// `reports/topics.json` under `layout`.
pub fn write_topic_outputs(
    layout: &ArtifactLayout,
    router: &TopicRouter,
    docs: &[KnowledgeDoc],
    report: &TopicsReport,
) -> Result<()> {
    std::fs::create_dir_all(&layout.root)?;
    let assigned = assign_docs(router, docs)?;
    let mut f = BufWriter::new(File::create(layout.clusters())?);
    for (doc, (cluster, w)) in docs.iter().zip(&assigned) {
        serde_json::to_writer(&mut f, &ClusterLine { doc_id: &doc.doc_id, cluster: *cluster, weights: w.as_slice() })?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    let mut t = BufWriter::new(File::create(layout.top_words())?);
    for (k, words) in top_words(&router.model, TOP_WORDS).iter().enumerate() {
        writeln!(t, "{k}\t{}", words.join(" "))?;
    }
    t.flush()?;
    write_json(&layout.reports().join("topics.json"), report)?;
    topics::save_topics(&layout.topic_ckpt(), router)
}

/// Word-level LM vocabulary over the corpus and any dialogues.
pub fn build_lm_vocab(docs: &[KnowledgeDoc], dialogues: &[DialogueSample], cap: usize) -> Result<Vocab> {
    let mut texts: Vec<String> = docs.iter().map(KnowledgeDoc::text).collect();
    texts.extend(dialogues.iter().map(DialogueSample::full_text));
    build_vocab(&texts, cap)
}

/// Stage (ii): fresh backbone from `cfg.model_seed`, documents split by
/// topic cluster, one expert trained per cluster.
pub fn train_experts_stage(
    docs: &[KnowledgeDoc],
    dialogues: &[DialogueSample],
    router: &TopicRouter,
    cfg: &PipelineConfig,
) -> Result<(ModelState, Vocab, ExpertReport)> {
    let vocab = build_lm_vocab(docs, dialogues, cfg.lm_vocab_cap)?;
    let mut mcfg = cfg.model.clone();
    mcfg.vocab_size = vocab.len();
    mcfg.n_experts = router.n_topics();
    let model = ModelState::init(mcfg, cfg.model_seed)?;
    let mut by_cluster = vec![Vec::new(); router.n_topics()];
    for (doc, (c, _)) in docs.iter().zip(assign_docs(router, docs)?) {
        by_cluster[c].push(doc.clone());
    }
    let (model, report) = train_experts(&by_cluster, model, &vocab, &cfg.experts, cfg.permute_ratio)?;
    Ok((model, vocab, report))
}

pub fn write_expert_outputs(
    layout: &ArtifactLayout,
    model: &ModelState,
    vocab: &Vocab,
    report: &ExpertReport,
) -> Result<()> {
    std::fs::create_dir_all(&layout.root)?;
    write_json(&layout.reports().join("experts.json"), report)?;
    netcore::save_model(&layout.base_model(), model, vocab)?;
    netcore::save_experts(&layout.experts_ckpt(), model)
}

/// Stage (iii) on loaded artifacts.
pub fn adapt_stage(
    data: &PipelineData,
    model: ModelState,
    vocab: &Vocab,
    router: &TopicRouter,
    cfg: &PipelineConfig,
) -> Result<(ModelState, RunReport)> {
    adapt_task(
        &data.train,
        &data.valid_seen,
        &data.valid_unseen,
        model,
        vocab,
        Routing::Topics(router),
        cfg.routing,
        &cfg.adapt,
    )
}

pub fn write_adapt_outputs(layout: &ArtifactLayout, model: &ModelState, vocab: &Vocab, report: &RunReport) -> Result<()> {
    write_json(&layout.reports().join("adapt_timing.json"), &report.timing_json())?;
    write_json(&layout.report_json(), report)?;
    netcore::save_model(&layout.model_ckpt(), model, vocab)
}

/// In-memory inputs of a pipeline run.
#[derive(Debug, Clone, Default)]
pub struct PipelineData {
    pub docs: Vec<KnowledgeDoc>,
    pub train: Vec<DialogueSample>,
    pub valid_seen: Vec<DialogueSample>,
    pub valid_unseen: Vec<DialogueSample>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    /// 1-based indices of the stages executed in this call.
    pub stages_run: Vec<usize>,
    pub router: TopicRouter,
    pub model: ModelState,
    pub vocab: Vocab,
    pub report: RunReport,
}

/// Runs stages (i) to (iii). The first stage whose outputs are incomplete is
/// rerun together with every later stage; completed earlier stages are
/// loaded from disk.
pub fn run_pipeline(data: &PipelineData, cfg: &PipelineConfig, layout: &ArtifactLayout) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let first = (1..=3).find(|&s| !layout.stage_complete(s)).unwrap_or(4);
    let mut stages_run = Vec::new();

    let router = if first <= 1 {
        info!("stage 1: topic model");
        let (router, report) = train_topics_stage(&data.docs, &data.train, cfg)?;
        write_topic_outputs(layout, &router, &data.docs, &report)?;
        stages_run.push(1);
        router
    } else {
        topics::load_topics(require(&layout.topic_ckpt())?)?
    };

    let (base, vocab) = if first <= 2 {
        info!("stage 2: knowledge experts");
        let (model, vocab, report) = train_experts_stage(&data.docs, &data.train, &router, cfg)?;
        for c in report.clusters.iter().filter(|c| c.n_docs == 0) {
            warn!("expert {} had no documents", c.cluster);
        }
        write_expert_outputs(layout, &model, &vocab, &report)?;
        stages_run.push(2);
        (model, vocab)
    } else {
        netcore::load_model(require(&layout.base_model())?)?
    };

    let (model, report) = if first <= 3 {
        info!("stage 3: task adaptation");
        let (model, report) = adapt_stage(data, base, &vocab, &router, cfg)?;
        write_adapt_outputs(layout, &model, &vocab, &report)?;
        stages_run.push(3);
        (model, report)
    } else {
        let (model, _) = netcore::load_model(require(&layout.model_ckpt())?)?;
        let report: RunReport = serde_json::from_str(&std::fs::read_to_string(layout.report_json())?)?;
        (model, report)
    };
    Ok(PipelineOutcome { stages_run, router, model, vocab, report })
}
