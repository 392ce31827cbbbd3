//! Stage configuration and the flat `section.key = value` config format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::{DEFAULT_BOW_VOCAB_CAP, DEFAULT_LM_VOCAB_CAP};
use crate::dialogform::DEFAULT_PERMUTE_RATIO;
use crate::error::{Error, Result};
use crate::netcore::{ModelConfig, RoutingMode};
use crate::topics::{AlignConfig, AlignInit, TopicTrainConfig};
use crate::trainer::adam::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Topics,
    Align,
    Experts,
    Adapt,
}

impl Stage {
    pub fn key(self) -> &'static str {
        match self {
            Stage::Topics => "topics",
            Stage::Align => "align",
            Stage::Experts => "experts",
            Stage::Adapt => "adapt",
        }
    }
}

/// Optimizer and schedule settings for one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let (lr, batch_size) = match stage {
            Stage::Topics => (2e-3, 64),
            Stage::Align => (1e-6, 32),
            Stage::Experts => (1e-4, 8),
            Stage::Adapt => (1e-5, 8),
        };
        Self {
            stage,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 50,
            patience: 5,
            batch_size,
            seed: 0,
            clip_norm: Some(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stage = self.stage.key();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("{stage}.lr must be positive")));
        }
        if self.patience < 1 {
            return Err(Error::invalid(format!("{stage}.patience must be at least 1")));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid(format!("{stage}.batch_size must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid(format!("{stage}.beta1/beta2 must lie in [0, 1)")));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid(format!("{stage}.clip must be positive or \"none\"")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }

    fn set(&mut self, field: &str, value: &str) -> std::result::Result<(), String> {
        match field {
            "lr" => self.lr = parse(value)?,
            "beta1" => self.beta1 = parse(value)?,
            "beta2" => self.beta2 = parse(value)?,
            "epochs" => self.epochs = parse(value)?,
            "patience" => self.patience = parse(value)?,
            "batch_size" => self.batch_size = parse(value)?,
            "seed" => self.seed = parse(value)?,
            "clip" => {
                self.clip_norm = if value.eq_ignore_ascii_case("none") { None } else { Some(parse(value)?) }
            }
            _ => return Err(format!("unknown key {}.{field}", self.stage.key())),
        }
        Ok(())
    }

    fn render(&self, out: &mut String) {
        let s = self.stage.key();
        let clip = self.clip_norm.map_or("none".to_string(), |c| c.to_string());
        let _ = writeln!(out, "{s}.lr = {}", self.lr);
        let _ = writeln!(out, "{s}.beta1 = {}", self.beta1);
        let _ = writeln!(out, "{s}.beta2 = {}", self.beta2);
        let _ = writeln!(out, "{s}.epochs = {}", self.epochs);
        let _ = writeln!(out, "{s}.patience = {}", self.patience);
        let _ = writeln!(out, "{s}.batch_size = {}", self.batch_size);
        let _ = writeln!(out, "{s}.seed = {}", self.seed);
        let _ = writeln!(out, "{s}.clip = {clip}");
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?}"))
}

/// Everything the three-stage pipeline needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub n_clusters: usize,
    pub routing: RoutingMode,
    pub permute_ratio: f64,
    pub lm_vocab_cap: usize,
    pub bow_vocab_cap: usize,
    /// `vocab_size` and `n_experts` are filled in from the data.
    pub model: ModelConfig,
    pub model_seed: u64,
    pub topic_hidden: usize,
    pub align_random_init: bool,
    pub topics: TrainConfig,
    pub align: TrainConfig,
    pub experts: TrainConfig,
    pub adapt: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut align = TrainConfig::for_stage(Stage::Align);
        align.epochs = 10;
        Self {
            n_clusters: 4,
            routing: RoutingMode::Weighted,
            permute_ratio: DEFAULT_PERMUTE_RATIO,
            lm_vocab_cap: DEFAULT_LM_VOCAB_CAP,
            bow_vocab_cap: DEFAULT_BOW_VOCAB_CAP,
            model: ModelConfig::default(),
            model_seed: 0,
            topic_hidden: 100,
            align_random_init: false,
            topics: TrainConfig::for_stage(Stage::Topics),
            align,
            experts: TrainConfig::for_stage(Stage::Experts),
            adapt: TrainConfig::for_stage(Stage::Adapt),
        }
    }
}

impl PipelineConfig {
    /// Sets every stage seed and the model-init seed at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.model_seed = seed;
        for c in [&mut self.topics, &mut self.align, &mut self.experts, &mut self.adapt] {
            c.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 {
            return Err(Error::invalid("pipeline.clusters must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.permute_ratio) {
            return Err(Error::invalid("pipeline.permute_ratio must lie in [0, 1]"));
        }
        if self.topic_hidden == 0 {
            return Err(Error::invalid("topics.hidden must be positive"));
        }
        for c in [&self.topics, &self.align, &self.experts, &self.adapt] {
            c.validate()?;
        }
        Ok(())
    }

    pub fn topic_train_config(&self) -> TopicTrainConfig {
        TopicTrainConfig {
            epochs: self.topics.epochs,
            lr: self.topics.lr,
            seed: self.topics.seed,
            hidden: self.topic_hidden,
            batch_size: self.topics.batch_size,
            betas: (self.topics.beta1, self.topics.beta2),
        }
    }

    pub fn align_config(&self) -> AlignConfig {
        AlignConfig {
            epochs: self.align.epochs,
            lr: self.align.lr,
            seed: self.align.seed,
            batch_size: self.align.batch_size,
            init: if self.align_random_init { AlignInit::Random(self.align.seed) } else { AlignInit::FromTopicModel },
            betas: (self.align.beta1, self.align.beta2),
        }
    }

    /// Applies one `section.field = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let (section, field) = key.split_once('.').ok_or_else(|| format!("key {key:?} has no section"))?;
        match (section, field) {
            ("pipeline", "seed") => self.set_seed(parse(value)?),
            ("pipeline", "clusters") => self.n_clusters = parse(value)?,
            ("pipeline", "mode") => self.routing = value.parse().map_err(|e: Error| e.to_string())?,
            ("pipeline", "permute_ratio") => self.permute_ratio = parse(value)?,
            ("vocab", "lm_cap") => self.lm_vocab_cap = parse(value)?,
            ("vocab", "bow_cap") => self.bow_vocab_cap = parse(value)?,
            ("model", "n_layers") => self.model.n_layers = parse(value)?,
            ("model", "n_heads") => self.model.n_heads = parse(value)?,
            ("model", "hidden") => self.model.hidden = parse(value)?,
            ("model", "bottleneck") => self.model.bottleneck = parse(value)?,
            ("model", "max_seq_len") => self.model.max_seq_len = parse(value)?,
            ("model", "seed") => self.model_seed = parse(value)?,
            ("topics", "hidden") => self.topic_hidden = parse(value)?,
            ("align", "init") => {
                self.align_random_init = match value {
                    "topic" => false,
                    "random" => true,
                    _ => return Err(format!("align.init must be \"topic\" or \"random\", got {value:?}")),
                }
            }
            ("topics", f) => self.topics.set(f, value)?,
            ("align", f) => self.align.set(f, value)?,
            ("experts", f) => self.experts.set(f, value)?,
            ("adapt", f) => self.adapt.set(f, value)?,
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    /// Parses config text, applying each line over `self`. Blank lines and
    /// `#` comments are skipped.
    pub fn apply_str(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let location = format!("{origin}:{}", i + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { location: location.clone(), message: "expected key = value".into() })?;
            self.set(k.trim(), v.trim()).map_err(|message| Error::Parse { location, message })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        cfg.apply_str(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Renders every key; `apply_str` on the output reproduces `self`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mode = match self.routing {
            RoutingMode::Weighted => "weighted",
            RoutingMode::OneHot => "one_hot",
            RoutingMode::NoExpert => "no_expert",
        };
        let _ = writeln!(out, "pipeline.clusters = {}", self.n_clusters);
        let _ = writeln!(out, "pipeline.mode = {mode}");
        let _ = writeln!(out, "pipeline.permute_ratio = {}", self.permute_ratio);
        let _ = writeln!(out, "vocab.lm_cap = {}", self.lm_vocab_cap);
        let _ = writeln!(out, "vocab.bow_cap = {}", self.bow_vocab_cap);
        let m = &self.model;
        let _ = writeln!(out, "model.n_layers = {}", m.n_layers);
        let _ = writeln!(out, "model.n_heads = {}", m.n_heads);
        let _ = writeln!(out, "model.hidden = {}", m.hidden);
        let _ = writeln!(out, "model.bottleneck = {}", m.bottleneck);
        let _ = writeln!(out, "model.max_seq_len = {}", m.max_seq_len);
        let _ = writeln!(out, "model.seed = {}", self.model_seed);
        let _ = writeln!(out, "topics.hidden = {}", self.topic_hidden);
        let _ = writeln!(out, "align.init = {}", if self.align_random_init { "random" } else { "topic" });
        for c in [&self.topics, &self.align, &self.experts, &self.adapt] {
            c.render(&mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.topics.lr, 2e-3);
        assert_eq!(c.experts.lr, 1e-4);
        assert_eq!(c.adapt.lr, 1e-5);
        assert_eq!(c.align.lr, 1e-6);
        assert_eq!(c.adapt.patience, 5);
        assert_eq!(c.experts.epochs, 50);
        assert_eq!(c.n_clusters, 4);
        c.validate().unwrap();
    }

    #[test]
    fn parse_and_render_round_trip() {
        let mut c = PipelineConfig::default();
        c.apply_str(
            "# fixture\npipeline.seed = 9\nexperts.lr = 3e-3 # faster\nadapt.clip = none\nmodel.hidden=32\n\nalign.init = random\npipeline.mode = one_hot\n",
            "test",
        )
        .unwrap();
        assert_eq!(c.experts.lr, 3e-3);
        assert_eq!(c.adapt.clip_norm, None);
        assert_eq!(c.model.hidden, 32);
        assert_eq!(c.topics.seed, 9);
        assert_eq!(c.model_seed, 9);
        assert!(c.align_random_init);
        assert_eq!(c.routing, RoutingMode::OneHot);

        let mut back = PipelineConfig::default();
        back.apply_str(&c.render(), "rendered").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn later_lines_override_earlier_ones() {
        let mut c = PipelineConfig::default();
        c.apply_str("pipeline.seed = 1\nexperts.seed = 4\n", "t").unwrap();
        assert_eq!(c.experts.seed, 4);
        assert_eq!(c.adapt.seed, 1);
    }

    #[test]
    fn bad_lines_name_their_location() {
        let mut c = PipelineConfig::default();
        for bad in ["experts.lr", "nosection = 1", "experts.colour = red", "adapt.epochs = many"] {
            let err = c.apply_str(&format!("\n{bad}\n"), "cfg.txt").unwrap_err();
            assert!(err.to_string().contains("cfg.txt:2"), "{err}");
        }
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = PipelineConfig::default();
        c.adapt.patience = 0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.experts.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.topics.clip_norm = Some(-1.0);
        assert!(c.validate().is_err());
    }
}
