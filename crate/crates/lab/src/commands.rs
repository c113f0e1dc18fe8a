//! The operations behind each subcommand.

use std::path::{Path, PathBuf};

use recon_core::data::Corpus;
use recon_core::metrics::{perplexity, recovery};
use recon_core::model::{GptModel, Weights};
use recon_core::train::{train_dense, unigram_perplexity, TrainLog};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::corpus::{load_corpus, sha256_hex, synthetic_corpus};
use crate::error::{LabError, Result};
use crate::report::{read_runs, write_summary, RunRecord};
use crate::sweep::{grid, run_sweep, SweepContext, SweepOptions, SweepOutcome};

pub fn default_dense_checkpoint(out: &Path) -> PathBuf {
    out.join("checkpoints").join("dense.ckpt")
}

fn holdout_tokens(cfg: &ExperimentConfig, corpus: &Corpus) -> Vec<usize> {
    let mut h = corpus.holdout_tokens();
    if cfg.eval.max_holdout_tokens > 0 {
        h.truncate(cfg.eval.max_holdout_tokens);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: Vec<TrainLog>,
    pub holdout_ppl: f64,
    pub unigram_ppl: f64,
}

/// Trains the dense model from its seeded initialization and saves it.
pub fn train_dense_cmd(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let bytes = load_corpus(cfg.corpus_path()?)?;
    let corpus_sha = sha256_hex(&bytes);
    let corpus = Corpus::new(bytes, cfg.eval.holdout_frac)?;
    let train = corpus.train_tokens();
    let holdout = holdout_tokens(cfg, &corpus);
    let mut model = GptModel::init(cfg.model_config()?, cfg.train.seed)?;
    let log = train_dense(&mut model, &train, Some(&holdout), &cfg.train_config())?;
    let holdout_ppl = perplexity(&model, &holdout, Weights::Dense)?;
    let unigram_ppl = unigram_perplexity(&train, &holdout, model.config.vocab);
    Checkpoint::new(model)
        .with_meta("kind", "dense")
        .with_meta("corpus_sha256", corpus_sha)
        .with_meta("steps", log.len().to_string())
        .with_meta("seed", cfg.train.seed.to_string())
        .with_meta("holdout_ppl", holdout_ppl.to_string())
        .with_meta("unigram_ppl", unigram_ppl.to_string())
        .save(checkpoint)?;
    Ok(TrainOutcome {
        checkpoint: checkpoint.to_path_buf(),
        log,
        holdout_ppl,
        unigram_ppl,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub checkpoint: PathBuf,
    pub ppl_dense: f64,
    pub ppl_pruned: f64,
    pub density: f64,
}

fn single_seed(cfg: &ExperimentConfig) -> Result<u64> {
    match cfg.seeds()?.as_slice() {
        [seed] => Ok(*seed),
        _ => Err(LabError::Config(
            "this command takes a single seed; use `sweep` for several".into(),
        )),
    }
}

fn density(model: &GptModel) -> f64 {
    let (kept, total) = model
        .blocks
        .iter()
        .flat_map(|b| b.matrices.iter())
        .fold((0.0, 0usize), |(k, t), m| {
            (k + m.mask.data().iter().sum::<f64>(), t + m.mask.len())
        });
    kept / total as f64
}

/// Prunes the dense checkpoint with the configured criterion and pattern.
pub fn prune_cmd(cfg: &ExperimentConfig, dense: &Path, output: &Path) -> Result<PruneOutcome> {
    let seed = single_seed(cfg)?;
    let ctx = SweepContext::load(cfg.clone(), dense)?;
    let pruned = ctx.prune_for_seed(seed)?;
    let d = density(&pruned.model);
    Checkpoint::new(pruned.model)
        .with_meta("kind", "pruned")
        .with_meta("dense_sha256", ctx.dense_sha256.clone())
        .with_meta("criterion", cfg.prune.criterion.clone())
        .with_meta("pattern", cfg.prune.pattern.clone())
        .with_meta("seed", seed.to_string())
        .save(output)?;
    Ok(PruneOutcome {
        checkpoint: output.to_path_buf(),
        ppl_dense: ctx.ppl_dense,
        ppl_pruned: pruned.ppl_pruned,
        density: d,
    })
}

/// Prunes and reconstructs a single grid cell, saving the result.
pub fn reconstruct_cmd(cfg: &ExperimentConfig, dense: &Path, output: &Path) -> Result<RunRecord> {
    let seed = single_seed(cfg)?;
    let cells = grid(cfg)?;
    let [cell] = cells.as_slice() else {
        return Err(LabError::Config(format!(
            "reconstruct runs exactly one configuration, the grid has {}; use `sweep`",
            cells.len()
        )));
    };
    let ctx = SweepContext::load(cfg.clone(), dense)?;
    let pruned = ctx.prune_for_seed(seed)?;
    let run = ctx.run_cell(&pruned, cell)?;
    Checkpoint::new(run.model)
        .with_meta("kind", "reconstructed")
        .with_meta("fingerprint", run.record.fingerprint.clone())
        .with_meta("ppl_dense", run.record.ppl_dense.to_string())
        .with_meta("ppl_pruned", run.record.ppl_pruned.to_string())
        .save(output)?;
    Ok(run.record)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub ppl_dense: f64,
    pub ppl_pruned: f64,
    pub density: f64,
    /// Recovery of the pruned view against the perplexities recorded in a
    /// reconstructed checkpoint's metadata.
    pub recovery: Option<f64>,
}

/// Perplexity of both weight views of a checkpoint on the holdout split.
pub fn eval_cmd(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalOutcome> {
    let bytes = load_corpus(cfg.corpus_path()?)?;
    let corpus = Corpus::new(bytes, cfg.eval.holdout_frac)?;
    let holdout = holdout_tokens(cfg, &corpus);
    let ckpt = Checkpoint::load(checkpoint)?;
    let ppl_dense = perplexity(&ckpt.model, &holdout, Weights::Dense)?;
    let ppl_pruned = perplexity(&ckpt.model, &holdout, Weights::Pruned)?;
    let meta = |k: &str| ckpt.meta.get(k).and_then(|v| v.parse::<f64>().ok());
    Ok(EvalOutcome {
        ppl_dense,
        ppl_pruned,
        density: density(&ckpt.model),
        recovery: match (meta("ppl_dense"), meta("ppl_pruned")) {
            (Some(d), Some(p)) => recovery(d, p, ppl_pruned),
            _ => None,
        },
    })
}

pub fn sweep_cmd(cfg: &ExperimentConfig, dense: &Path, opts: SweepOptions) -> Result<SweepOutcome> {
    let ctx = SweepContext::load(cfg.clone(), dense)?;
    run_sweep(&ctx, &cfg.out_dir(), opts)
}

/// Rebuilds `summary.md` from every run record under `out`.
pub fn report_cmd(out: &Path, cfg: Option<&ExperimentConfig>) -> Result<(PathBuf, usize)> {
    let records = read_runs(out)?;
    let saved = out.join("sweep.toml");
    let loaded;
    let cfg = match cfg {
        Some(c) => Some(c),
        None if saved.exists() => {
            loaded = ExperimentConfig::load(&saved)?;
            Some(&loaded)
        }
        None => None,
    };
    let model = cfg.map(|c| c.model_config()).transpose()?;
    Ok((write_summary(out, &records, model.as_ref())?, records.len()))
}

pub fn gen_corpus_cmd(path: &Path, bytes: usize, seed: u64) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    crate::checkpoint::write_atomic(path, &synthetic_corpus(bytes, seed))
}
