//! Command-line front end. Every subcommand is a thin wrapper over the
//! library; artifacts land in a fixed directory layout so stages find each
//! other.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::corpus::{self, gen_synthetic, read_corpus, read_dialogues, SyntheticSpec, Turn};
use crate::error::{Error, Result};
use crate::evalkit::{self, Routing, DEFAULT_GEN_LEN};
use crate::latbench::{run_bench, BenchConfig};
use crate::netcore::{self, RoutingMode};
use crate::topics::{self, TopicWeights};
use crate::trainer::pipeline::{
    self, adapt_stage, require, train_experts_stage, train_topics_stage, write_adapt_outputs,
    write_json, write_topic_outputs,
};
use crate::trainer::{ArtifactLayout, PipelineConfig, PipelineData};

/// Environment variable consulted when `--seed` is absent.
pub const SEED_ENV: &str = "KNOWEXPERT_SEED";

#[derive(Debug, Parser)]
#[command(name = "knowexpert", version, about = "Retrieval-free knowledge-grounded dialogue with topic-routed experts")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stage (falls back to $KNOWEXPERT_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic clustered corpus and dialogue splits.
    Synth(SynthArgs),
    /// Stage 1: topic model (and history encoder when dialogues are given).
    TrainTopics(TrainTopicsArgs),
    /// Stage 2: one knowledge expert per topic cluster.
    TrainExperts(TrainExpertsArgs),
    /// Stage 3: task adaptation of the backbone.
    Adapt(AdaptArgs),
    /// Greedy response for one history.
    Generate(GenerateArgs),
    /// PPL, F1 and Dist-1/2 over a dialogue file.
    Eval(EvalArgs),
    /// Latency of topic routing against TF-IDF retrieval.
    Bench(BenchArgs),
    /// All three stages, resuming from whatever is already in --out.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub clusters: usize,
    #[arg(long, default_value_t = 50)]
    pub docs_per_cluster: usize,
    #[arg(long, default_value_t = 20)]
    pub words_per_cluster: usize,
    #[arg(long, default_value_t = 5)]
    pub sentences: usize,
    #[arg(long, default_value_t = 6)]
    pub sentence_len: usize,
    #[arg(long, default_value_t = 40)]
    pub dialogues_per_cluster: usize,
}

#[derive(Debug, Args)]
pub struct TrainTopicsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Artifact directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training dialogues for the history encoder.
    #[arg(long)]
    pub dialogues: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainExpertsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub topic: PathBuf,
    /// Output model file (backbone + experts); `experts.ckpt` is written
    /// next to it.
    #[arg(long)]
    pub model_out: PathBuf,
    /// Dialogues whose words join the LM vocabulary.
    #[arg(long)]
    pub dialogues: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub dialogues: PathBuf,
    #[arg(long)]
    pub valid_seen: PathBuf,
    #[arg(long)]
    pub valid_unseen: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub topic: PathBuf,
    /// Artifact directory (defaults to the model's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub topic: Option<PathBuf>,
    /// Turns as `u: ...|s: ...|u: ...`; the last must be a user turn.
    #[arg(long)]
    pub history: String,
    /// weighted, one_hot or expert=<i>.
    #[arg(long, default_value = "weighted")]
    pub mode: String,
    #[arg(long, default_value_t = DEFAULT_GEN_LEN)]
    pub max_len: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub topic: Option<PathBuf>,
    #[arg(long)]
    pub dialogues: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "weighted")]
    pub mode: String,
    #[arg(long, default_value_t = DEFAULT_GEN_LEN)]
    pub max_len: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub topic: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated corpus sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [1_000usize, 10_000, 100_000])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = DEFAULT_GEN_LEN)]
    pub gen_len: usize,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub dialogues: PathBuf,
    #[arg(long)]
    pub valid_seen: PathBuf,
    #[arg(long)]
    pub valid_unseen: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Routing selected on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum ModeArg {
    Topic(RoutingMode),
    Expert(usize),
}

pub fn parse_mode(s: &str) -> Result<ModeArg> {
    if let Some(i) = s.strip_prefix("expert=") {
        let i = i.trim().parse().map_err(|_| Error::invalid(format!("bad expert index in {s:?}")))?;
        return Ok(ModeArg::Expert(i));
    }
    Ok(ModeArg::Topic(s.parse()?))
}

/// Parses the `u: ...|s: ...` history format.
pub fn parse_history(s: &str) -> Result<Vec<Turn>> {
    let mut turns = Vec::new();
    for part in s.split('|') {
        let part = part.trim();
        let (role, text) = part
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("history turn {part:?} lacks a u:/s: prefix")))?;
        let text = text.trim();
        match role.trim() {
            "u" => turns.push(Turn::user(text)),
            "s" => turns.push(Turn::system(text)),
            other => return Err(Error::invalid(format!("unknown speaker {other:?} in history"))),
        }
    }
    match turns.last() {
        Some(t) if t.role == corpus::Role::User => Ok(turns),
        _ => Err(Error::invalid("history must end with a user turn")),
    }
}

fn resolve_config(global: &GlobalOpts) -> Result<PipelineConfig> {
    let mut cfg = match &global.config {
        Some(p) => PipelineConfig::from_file(require(p)?)?,
        None => PipelineConfig::default(),
    };
    let seed = match global.seed {
        Some(s) => Some(s),
        None => match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| Error::invalid(format!("{SEED_ENV}={v:?} is not a number")))?),
            Err(_) => None,
        },
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn check_inputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        require(p)?;
    }
    Ok(())
}

fn load_dialogues(path: &Option<PathBuf>) -> Result<Vec<corpus::DialogueSample>> {
    path.as_deref().map_or(Ok(Vec::new()), read_dialogues)
}

fn synth(args: &SynthArgs, cfg: &PipelineConfig) -> Result<()> {
    let spec = SyntheticSpec::new(args.clusters, args.docs_per_cluster, args.words_per_cluster, args.sentences, cfg.model_seed)
        .with_sentence_len(args.sentence_len)
        .with_dialogues_per_cluster(args.dialogues_per_cluster);
    let data = gen_synthetic(&spec);
    let splits = data.dialogue_splits(5);
    std::fs::create_dir_all(&args.out)?;
    corpus::write_corpus(&args.out.join("corpus.jsonl"), &data.docs)?;
    corpus::write_dialogues(&args.out.join("train.jsonl"), &splits.train)?;
    corpus::write_dialogues(&args.out.join("valid_seen.jsonl"), &splits.valid_seen)?;
    corpus::write_dialogues(&args.out.join("valid_unseen.jsonl"), &splits.valid_unseen)?;
    let labels: Vec<String> = data.doc_labels.iter().map(usize::to_string).collect();
    std::fs::write(args.out.join("doc_labels.txt"), labels.join("\n") + "\n")?;
    println!(
        "{} docs, {} train / {} seen / {} unseen dialogues",
        data.docs.len(),
        splits.train.len(),
        splits.valid_seen.len(),
        splits.valid_unseen.len()
    );
    Ok(())
}

fn train_topics(args: &TrainTopicsArgs, mut cfg: PipelineConfig) -> Result<()> {
    check_inputs(&[&args.corpus])?;
    if let Some(d) = &args.dialogues {
        check_inputs(&[d])?;
    }
    if let Some(l) = args.clusters {
        cfg.n_clusters = l;
    }
    if let Some(e) = args.epochs {
        cfg.topics.epochs = e;
    }
    cfg.validate()?;
    let docs = read_corpus(&args.corpus)?;
    let dialogues = load_dialogues(&args.dialogues)?;
    let (router, report) = train_topics_stage(&docs, &dialogues, &cfg)?;
    let layout = ArtifactLayout::new(&args.out);
    write_topic_outputs(&layout, &router, &docs, &report)?;
    for (k, n) in report.cluster_sizes.iter().enumerate() {
        println!("topic {k}: {n} docs");
    }
    Ok(())
}

fn train_experts_cmd(args: &TrainExpertsArgs, mut cfg: PipelineConfig) -> Result<()> {
    check_inputs(&[&args.corpus, &args.topic])?;
    if let Some(d) = &args.dialogues {
        check_inputs(&[d])?;
    }
    if let Some(e) = args.epochs {
        cfg.experts.epochs = e;
    }
    cfg.validate()?;
    let docs = read_corpus(&args.corpus)?;
    let dialogues = load_dialogues(&args.dialogues)?;
    let router = topics::load_topics(&args.topic)?;
    let (model, vocab, report) = train_experts_stage(&docs, &dialogues, &router, &cfg)?;
    let dir = args.model_out.parent().map(Path::to_path_buf).unwrap_or_default();
    std::fs::create_dir_all(if dir.as_os_str().is_empty() { Path::new(".") } else { &dir })?;
    write_json(&dir.join("reports").join("experts.json"), &report)?;
    netcore::save_model(&args.model_out, &model, &vocab)?;
    netcore::save_experts(&dir.join("experts.ckpt"), &model)?;
    for c in &report.clusters {
        match c.final_nll {
            Some(nll) => println!("expert {}: {} docs, final nll {nll:.4}", c.cluster, c.n_docs),
            None => {
                warn!("expert {} had no documents and stays at its identity init", c.cluster);
                println!("expert {}: 0 docs (identity)", c.cluster);
            }
        }
    }
    Ok(())
}

fn adapt_cmd(args: &AdaptArgs, mut cfg: PipelineConfig) -> Result<()> {
    check_inputs(&[&args.dialogues, &args.valid_seen, &args.valid_unseen, &args.model, &args.topic])?;
    if let Some(e) = args.epochs {
        cfg.adapt.epochs = e;
    }
    if let Some(m) = &args.mode {
        cfg.routing = m.parse()?;
    }
    cfg.validate()?;
    let data = PipelineData {
        docs: vec![],
        train: read_dialogues(&args.dialogues)?,
        valid_seen: read_dialogues(&args.valid_seen)?,
        valid_unseen: read_dialogues(&args.valid_unseen)?,
    };
    let router = topics::load_topics(&args.topic)?;
    let (model, vocab) = netcore::load_model(&args.model)?;
    let (model, report) = adapt_stage(&data, model, &vocab, &router, &cfg)?;
    let out = args.out.clone().unwrap_or_else(|| args.model.parent().map(Path::to_path_buf).unwrap_or_default());
    write_adapt_outputs(&ArtifactLayout::new(out), &model, &vocab, &report)?;
    let e = report.selected_epoch;
    println!(
        "selected epoch {} (ppl seen {:.3}, unseen {:.3}; before {:.3} / {:.3})",
        e + 1,
        report.valid_ppl_seen[e],
        report.valid_ppl_unseen[e],
        report.initial_ppl_seen,
        report.initial_ppl_unseen
    );
    Ok(())
}

fn routing_for(mode: &ModeArg, topic: &Option<PathBuf>, n_experts: usize) -> Result<(Option<topics::TopicRouter>, Option<TopicWeights>, RoutingMode)> {
    match mode {
        ModeArg::Expert(i) => {
            if *i >= n_experts {
                return Err(Error::invalid(format!("expert {i} out of range (model has {n_experts})")));
            }
            Ok((None, Some(TopicWeights::one_hot(n_experts, *i)), RoutingMode::OneHot))
        }
        ModeArg::Topic(m) => {
            let path = topic.as_deref().ok_or_else(|| Error::invalid("--topic is required unless --mode expert=<i>"))?;
            Ok((Some(topics::load_topics(require(path)?)?), None, *m))
        }
    }
}

fn generate_cmd(args: &GenerateArgs) -> Result<()> {
    let mode = parse_mode(&args.mode)?;
    let history = parse_history(&args.history)?;
    let (model, vocab) = netcore::load_model(require(&args.model)?)?;
    let (router, fixed, rmode) = routing_for(&mode, &args.topic, model.config.n_experts)?;
    let routing = match (&router, &fixed) {
        (Some(r), _) => Routing::Topics(r),
        (None, Some(w)) => Routing::Fixed(w),
        _ => unreachable!("one routing source is always set"),
    };
    let out = evalkit::generate(&model, &vocab, routing, &history, rmode, args.max_len)?;
    println!("{out}");
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let mode = parse_mode(&args.mode)?;
    check_inputs(&[&args.model, &args.dialogues])?;
    let data = read_dialogues(&args.dialogues)?;
    let (model, vocab) = netcore::load_model(&args.model)?;
    let (router, fixed, rmode) = routing_for(&mode, &args.topic, model.config.n_experts)?;
    let routing = match (&router, &fixed) {
        (Some(r), _) => Routing::Topics(r),
        (None, Some(w)) => Routing::Fixed(w),
        _ => unreachable!("one routing source is always set"),
    };
    let (report, records) = evalkit::evaluate(&model, &vocab, routing, &data, rmode, args.max_len)?;
    evalkit::write_eval(&args.out, &report, &records)?;
    println!(
        "ppl {:.3}  f1 {:.4}  dist-1 {:.4}  dist-2 {:.4}  ({} samples)",
        report.ppl, report.f1, report.dist1, report.dist2, report.n_samples
    );
    Ok(())
}

fn bench_cmd(args: &BenchArgs, cfg: &PipelineConfig) -> Result<()> {
    check_inputs(&[&args.model, &args.topic])?;
    let (model, vocab) = netcore::load_model(&args.model)?;
    let router = topics::load_topics(&args.topic)?;
    let bcfg = BenchConfig {
        sizes: args.sizes.clone(),
        n_samples: args.samples,
        trials: args.trials,
        gen_len: args.gen_len,
        seed: cfg.model_seed,
        ..BenchConfig::default()
    };
    let report = run_bench(&model, &vocab, &router, &bcfg)?;
    std::fs::create_dir_all(&args.out)?;
    report.write_json(&args.out.join("bench_report.json"))?;
    report.write_csv(&args.out.join("bench_report.csv"))?;
    println!("{:<11} {:>8} {:>10} {:>10} {:>10} {:>10}", "method", "docs", "mean_s", "stdev_s", "lookup_s", "gen_s");
    for r in &report.rows {
        println!(
            "{:<11} {:>8} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            r.method, r.corpus_size, r.mean_s, r.stdev_s, r.lookup_s, r.gen_s
        );
    }
    Ok(())
}

fn pipeline_cmd(args: &PipelineArgs, cfg: &PipelineConfig) -> Result<()> {
    check_inputs(&[&args.corpus, &args.dialogues, &args.valid_seen, &args.valid_unseen])?;
    cfg.validate()?;
    let data = PipelineData {
        docs: read_corpus(&args.corpus)?,
        train: read_dialogues(&args.dialogues)?,
        valid_seen: read_dialogues(&args.valid_seen)?,
        valid_unseen: read_dialogues(&args.valid_unseen)?,
    };
    let layout = ArtifactLayout::new(&args.out);
    std::fs::create_dir_all(&layout.root)?;
    std::fs::write(layout.root.join("config.txt"), cfg.render())?;
    let outcome = pipeline::run_pipeline(&data, cfg, &layout)?;
    info!("stages run: {:?}", outcome.stages_run);
    let e = outcome.report.selected_epoch;
    println!(
        "stages run {:?}; selected epoch {}; ppl seen {:.3} (before {:.3}), unseen {:.3} (before {:.3})",
        outcome.stages_run,
        e + 1,
        outcome.report.valid_ppl_seen[e],
        outcome.report.initial_ppl_seen,
        outcome.report.valid_ppl_unseen[e],
        outcome.report.initial_ppl_unseen
    );
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    match &cli.command {
        Command::Synth(a) => synth(a, &cfg),
        Command::TrainTopics(a) => train_topics(a, cfg),
        Command::TrainExperts(a) => train_experts_cmd(a, cfg),
        Command::Adapt(a) => adapt_cmd(a, cfg),
        Command::Generate(a) => generate_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a, &cfg),
        Command::Pipeline(a) => pipeline_cmd(a, &cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_format() {
        let h = parse_history("u: hi there|s: hello|u: tell me").unwrap();
        assert_eq!(h, vec![Turn::user("hi there"), Turn::system("hello"), Turn::user("tell me")]);
        assert!(parse_history("s: only system").is_err());
        assert!(parse_history("x: who").is_err());
        assert!(parse_history("no prefix").is_err());
    }

    #[test]
    fn mode_flag() {
        assert_eq!(parse_mode("weighted").unwrap(), ModeArg::Topic(RoutingMode::Weighted));
        assert_eq!(parse_mode("one_hot").unwrap(), ModeArg::Topic(RoutingMode::OneHot));
        assert_eq!(parse_mode("expert=3").unwrap(), ModeArg::Expert(3));
        assert!(parse_mode("expert=x").is_err());
        assert!(parse_mode("loud").is_err());
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
