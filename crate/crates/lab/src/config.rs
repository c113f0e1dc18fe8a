//! Experiment configuration: a TOML file with CLI overrides on top.

use std::path::{Path, PathBuf};

use recon_core::criteria::{Criterion, Damping, SparseGptConfig, SparsityPattern};
use recon_core::data::VOCAB_SIZE;
use recon_core::model::{Granularity, ModelConfig, NormKind};
use recon_core::optim::OptimConfig;
use recon_core::recon::{PropagationStrategy, ReconLoss};
use recon_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

fn config_err(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    /// `layernorm` or `rmsnorm`.
    #[serde(default = "default_norm")]
    pub norm: String,
    #[serde(default)]
    pub tie_lm_head: bool,
}

fn default_vocab() -> usize {
    VOCAB_SIZE
}

fn default_norm() -> String {
    "layernorm".into()
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            seq_len: 64,
            vocab: VOCAB_SIZE,
            norm: default_norm(),
            tie_lm_head: false,
        }
    }
}

impl From<&ModelConfig> for ModelSection {
    fn from(c: &ModelConfig) -> Self {
        Self {
            n_blocks: c.n_blocks,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            seq_len: c.seq_len,
            vocab: c.vocab,
            norm: match c.norm_kind {
                NormKind::LayerNorm => "layernorm".into(),
                NormKind::RmsNorm => "rmsnorm".into(),
            },
            tie_lm_head: c.tie_lm_head,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self) -> recon_core::Result<ModelConfig> {
        let norm_kind = match self.norm.as_str() {
            "layernorm" => NormKind::LayerNorm,
            "rmsnorm" => NormKind::RmsNorm,
            other => {
                return Err(recon_core::Error::InvalidConfig(format!(
                    "unknown norm {other:?}"
                )))
            }
        };
        let c = ModelConfig {
            n_blocks: self.n_blocks,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab: self.vocab,
            seq_len: self.seq_len,
            norm_kind,
            tie_lm_head: self.tie_lm_head,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub target_ppl: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            lr: 3e-3,
            warmup_frac: 0.05,
            weight_decay: 0.0,
            clip_norm: 1.0,
            seed: 0,
            eval_every: 100,
            target_ppl: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub n_samples: usize,
    /// Tokens per sample; defaults to the model context.
    pub seq_len: Option<usize>,
    pub seeds: Vec<u64>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            n_samples: 16,
            seq_len: None,
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub criterion: String,
    pub pattern: String,
    /// SparseGPT damping relative to the mean Gram diagonal.
    pub damping: f64,
    pub block_size: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            criterion: "wanda".into(),
            pattern: "50%".into(),
            damping: 0.01,
            block_size: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructSection {
    pub granularities: Vec<String>,
    pub strategies: Vec<String>,
    pub losses: Vec<String>,
    pub lrs: Vec<f64>,
    pub epochs: Vec<usize>,
    pub batch_size: usize,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub train_norm_params: bool,
    /// Also run full retraining with cross-entropy for every (lr, epochs, seed).
    pub retrain: bool,
    pub save_checkpoints: bool,
}

impl Default for ReconstructSection {
    fn default() -> Self {
        Self {
            granularities: vec!["half-block".into()],
            strategies: vec!["mp".into()],
            losses: vec!["mse".into()],
            lrs: vec![3e-5],
            epochs: vec![20],
            batch_size: 2,
            warmup_frac: 0.1,
            weight_decay: 0.0,
            train_norm_params: false,
            retrain: false,
            save_checkpoints: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub holdout_frac: f64,
    /// Cap on holdout tokens used for perplexity; 0 uses all of them.
    pub max_holdout_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            holdout_frac: 0.1,
            max_holdout_tokens: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub calibration: CalibrationSection,
    pub prune: PruneSection,
    pub reconstruct: ReconstructSection,
    pub eval: EvalSection,
}

/// Values given on the command line; each replaces its config counterpart.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub granularity: Vec<String>,
    pub strategy: Vec<String>,
    pub loss: Vec<String>,
    pub lr: Vec<f64>,
    pub epochs: Vec<usize>,
    pub pattern: Option<String>,
    pub criterion: Option<String>,
}

fn parse_all<T>(items: &[String], what: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    if items.is_empty() {
        return Err(config_err(format!("no {what} given")));
    }
    items
        .iter()
        .map(|s| parse(s).ok_or_else(|| config_err(format!("unknown {what} {s:?}"))))
        .collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(c) = &o.corpus {
            self.corpus = Some(c.clone());
        }
        if let Some(out) = &o.out {
            self.out_dir = Some(out.clone());
        }
        if let Some(seed) = o.seed {
            self.calibration.seeds = vec![seed];
            self.train.seed = seed;
        }
        let r = &mut self.reconstruct;
        for (dst, src) in [
            (&mut r.granularities, &o.granularity),
            (&mut r.strategies, &o.strategy),
            (&mut r.losses, &o.loss),
        ] {
            if !src.is_empty() {
                dst.clone_from(src);
            }
        }
        if !o.lr.is_empty() {
            r.lrs.clone_from(&o.lr);
        }
        if !o.epochs.is_empty() {
            r.epochs.clone_from(&o.epochs);
        }
        if let Some(p) = &o.pattern {
            self.prune.pattern.clone_from(p);
        }
        if let Some(c) = &o.criterion {
            self.prune.criterion.clone_from(c);
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(self.model.to_config()?)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn corpus_path(&self) -> Result<&Path> {
        self.corpus
            .as_deref()
            .ok_or_else(|| config_err("no corpus path (use --corpus or `corpus = ...`)"))
    }

    pub fn calibration_seq_len(&self) -> Result<usize> {
        let s = self.calibration.seq_len.unwrap_or(self.model.seq_len);
        if s < 2 || s > self.model.seq_len {
            return Err(config_err(format!(
                "calibration seq_len {s} outside 2..={}",
                self.model.seq_len
            )));
        }
        Ok(s)
    }

    pub fn criterion(&self) -> Result<Criterion> {
        Criterion::parse(&self.prune.criterion)
            .ok_or_else(|| config_err(format!("unknown criterion {:?}", self.prune.criterion)))
    }

    pub fn pattern(&self) -> Result<SparsityPattern> {
        SparsityPattern::parse(&self.prune.pattern)
            .ok_or_else(|| config_err(format!("invalid pattern {:?}", self.prune.pattern)))
    }

    pub fn sparsegpt(&self) -> Result<SparseGptConfig> {
        if self.prune.damping.is_nan() || self.prune.damping < 0.0 || self.prune.block_size == 0 {
            return Err(config_err(
                "sparsegpt damping must be >= 0 and block_size > 0",
            ));
        }
        Ok(SparseGptConfig {
            damping: Damping::Relative(self.prune.damping),
            block_size: self.prune.block_size,
        })
    }

    pub fn granularities(&self) -> Result<Vec<Granularity>> {
        let n = self.model.n_blocks;
        let gs = parse_all(
            &self.reconstruct.granularities,
            "granularity",
            Granularity::parse,
        )?;
        for g in &gs {
            if let Granularity::Blocks(k) = g {
                if *k > n {
                    return Err(config_err(format!(
                        "granularity blocks-{k} exceeds {n} blocks"
                    )));
                }
            }
        }
        Ok(gs)
    }

    pub fn strategies(&self) -> Result<Vec<PropagationStrategy>> {
        parse_all(
            &self.reconstruct.strategies,
            "strategy",
            PropagationStrategy::parse,
        )
    }

    pub fn losses(&self) -> Result<Vec<ReconLoss>> {
        parse_all(&self.reconstruct.losses, "loss", ReconLoss::parse)
    }

    pub fn lrs(&self) -> Result<Vec<f64>> {
        let lrs = &self.reconstruct.lrs;
        if lrs.is_empty() || lrs.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(config_err(
                "learning rates must be positive and at least one is needed",
            ));
        }
        Ok(lrs.clone())
    }

    pub fn epochs(&self) -> Result<Vec<usize>> {
        if self.reconstruct.epochs.is_empty() {
            return Err(config_err("no epochs given"));
        }
        Ok(self.reconstruct.epochs.clone())
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        if self.calibration.seeds.is_empty() {
            return Err(config_err("at least one seed is required"));
        }
        Ok(self.calibration.seeds.clone())
    }

    /// Optimizer settings of one sweep cell.
    pub fn optim(&self, lr: f64, epochs: usize, seed: u64) -> OptimConfig {
        OptimConfig {
            lr,
            epochs,
            warmup_frac: self.reconstruct.warmup_frac,
            batch_size: self.reconstruct.batch_size,
            weight_decay: self.reconstruct.weight_decay,
            seed,
            ..OptimConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_frac: t.warmup_frac,
            weight_decay: t.weight_decay,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
            seed: t.seed,
            eval_every: t.eval_every,
            target_ppl: t.target_ppl,
        }
    }

    /// Checks every enumerated value up front.
    pub fn validate(&self) -> Result<()> {
        let model = self.model_config()?;
        if model.vocab < VOCAB_SIZE {
            return Err(config_err(format!(
                "vocab must be at least {VOCAB_SIZE} for byte tokens"
            )));
        }
        self.calibration_seq_len()?;
        self.criterion()?;
        let pattern = self.pattern()?;
        pattern.check_columns(model.d_model)?;
        pattern.check_columns(model.d_ff)?;
        self.sparsegpt()?;
        self.granularities()?;
        self.strategies()?;
        self.losses()?;
        self.lrs()?;
        self.epochs()?;
        self.seeds()?;
        if self.calibration.n_samples == 0 || self.reconstruct.batch_size == 0 {
            return Err(config_err("n_samples and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.eval.holdout_frac) || self.eval.holdout_frac == 0.0 {
            return Err(config_err("holdout_frac must lie in (0, 1)"));
        }
        Ok(())
    }
}
