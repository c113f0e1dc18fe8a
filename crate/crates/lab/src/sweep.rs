//! Cartesian sweeps over reconstruction settings with fingerprinted,
//! resumable cells.

use std::fs;
use std::path::{Path, PathBuf};

use recon_core::data::{sample_calibration, CalibrationSet, Corpus};
use recon_core::metrics::{perplexity, recovery};
use recon_core::model::{GptModel, Granularity, Weights};
use recon_core::prune::prune_model;
use recon_core::recon::{
    reconstruct_pruned, retrain_full, PropagationStrategy, ReconLoss, TraceRow, UnitOutcome,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::{ExperimentConfig, ModelSection};
use crate::corpus::{load_corpus, sha256_hex};
use crate::error::{LabError, Result};
use crate::report::{format_lr, read_run, run_path, write_run, write_summary, RunRecord, RETRAIN};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CellKind {
    Reconstruct {
        granularity: Granularity,
        strategy: PropagationStrategy,
        loss: ReconLoss,
    },
    /// End-to-end cross-entropy fine-tuning of the pruned model.
    Retrain,
}

/// One point of the sweep grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub kind: CellKind,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Cell {
    fn labels(&self) -> (String, String, String) {
        match self.kind {
            CellKind::Reconstruct {
                granularity,
                strategy,
                loss,
            } => (
                granularity.label(),
                strategy.label().into(),
                loss.label().into(),
            ),
            CellKind::Retrain => (RETRAIN.into(), "-".into(), "ce".into()),
        }
    }
}

/// Every cell of the grid: seeds outermost, then granularity, strategy, loss,
/// learning rate and epochs, with retraining cells after each seed's
/// reconstruction cells.
pub fn grid(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    cfg.validate()?;
    let (grans, strategies, losses) = (cfg.granularities()?, cfg.strategies()?, cfg.losses()?);
    let (lrs, epochs) = (cfg.lrs()?, cfg.epochs()?);
    let mut cells = Vec::new();
    for seed in cfg.seeds()? {
        for &granularity in &grans {
            for &strategy in &strategies {
                for &loss in &losses {
                    for &lr in &lrs {
                        for &ep in &epochs {
                            cells.push(Cell {
                                kind: CellKind::Reconstruct {
                                    granularity,
                                    strategy,
                                    loss,
                                },
                                lr,
                                epochs: ep,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        if cfg.reconstruct.retrain {
            for &lr in &lrs {
                for &ep in &epochs {
                    cells.push(Cell {
                        kind: CellKind::Retrain,
                        lr,
                        epochs: ep,
                        seed,
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Everything that determines a cell's result, in canonical form.
#[derive(Serialize)]
struct FingerprintInput<'a> {
    version: u32,
    corpus_sha256: &'a str,
    dense_sha256: &'a str,
    model: &'a ModelSection,
    holdout_frac: f64,
    max_holdout_tokens: usize,
    calibration_samples: usize,
    calibration_seq_len: usize,
    criterion: &'a str,
    pattern: String,
    sparsegpt_damping: f64,
    sparsegpt_block_size: usize,
    batch_size: usize,
    warmup_frac: f64,
    weight_decay: f64,
    train_norm_params: bool,
    granularity: String,
    strategy: String,
    loss: String,
    lr: String,
    epochs: usize,
    seed: u64,
}

/// Dense model, corpus and derived quantities shared by all cells.
pub struct SweepContext {
    pub cfg: ExperimentConfig,
    pub dense: GptModel,
    pub dense_sha256: String,
    pub corpus_sha256: String,
    pub corpus: Corpus,
    pub holdout: Vec<usize>,
    pub ppl_dense: f64,
}

/// The pruned model of one calibration seed.
pub struct PrunedState {
    pub seed: u64,
    pub calibration: CalibrationSet,
    pub model: GptModel,
    pub ppl_pruned: f64,
    pub mask_violations: usize,
}

/// A finished cell before it is written out.
pub struct CellRun {
    pub record: RunRecord,
    pub trace: Vec<TraceRow>,
    pub model: GptModel,
}

pub fn model_label(s: &ModelSection) -> String {
    format!(
        "gpt-b{}-d{}-h{}-f{}-{}",
        s.n_blocks, s.d_model, s.n_heads, s.d_ff, s.norm
    )
}

impl SweepContext {
    pub fn new(
        cfg: ExperimentConfig,
        dense: Checkpoint,
        dense_sha256: String,
        corpus_bytes: Vec<u8>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut dense = dense.model;
        if ModelSection::from(&dense.config) != cfg.model {
            return Err(LabError::Config(
                "checkpoint model does not match the [model] section".into(),
            ));
        }
        dense.reset_pruning();
        let corpus_sha256 = sha256_hex(&corpus_bytes);
        let corpus = Corpus::new(corpus_bytes, cfg.eval.holdout_frac)?;
        let mut holdout = corpus.holdout_tokens();
        if cfg.eval.max_holdout_tokens > 0 {
            holdout.truncate(cfg.eval.max_holdout_tokens);
        }
        let ppl_dense = perplexity(&dense, &holdout, Weights::Dense)?;
        Ok(Self {
            cfg,
            dense,
            dense_sha256,
            corpus_sha256,
            corpus,
            holdout,
            ppl_dense,
        })
    }

    /// Reads the corpus named by the config and the dense checkpoint.
    pub fn load(cfg: ExperimentConfig, checkpoint: &Path) -> Result<Self> {
        let corpus = load_corpus(cfg.corpus_path()?)?;
        let bytes = fs::read(checkpoint).map_err(|e| LabError::io(checkpoint, e))?;
        let ckpt = Checkpoint::from_bytes(&bytes, checkpoint)?;
        Self::new(cfg, ckpt, sha256_hex(&bytes), corpus)
    }

    pub fn fingerprint(&self, cell: &Cell) -> Result<String> {
        let cfg = &self.cfg;
        let sg = cfg.sparsegpt()?;
        let damping = match sg.damping {
            recon_core::criteria::Damping::Relative(v)
            | recon_core::criteria::Damping::Absolute(v) => v,
        };
        let (granularity, strategy, loss) = cell.labels();
        let input = FingerprintInput {
            version: 1,
            corpus_sha256: &self.corpus_sha256,
            dense_sha256: &self.dense_sha256,
            model: &cfg.model,
            holdout_frac: cfg.eval.holdout_frac,
            max_holdout_tokens: cfg.eval.max_holdout_tokens,
            calibration_samples: cfg.calibration.n_samples,
            calibration_seq_len: cfg.calibration_seq_len()?,
            criterion: cfg.criterion()?.label(),
            pattern: cfg.pattern()?.label(),
            sparsegpt_damping: damping,
            sparsegpt_block_size: sg.block_size,
            batch_size: cfg.reconstruct.batch_size,
            warmup_frac: cfg.reconstruct.warmup_frac,
            weight_decay: cfg.reconstruct.weight_decay,
            train_norm_params: cfg.reconstruct.train_norm_params,
            granularity,
            strategy,
            loss,
            lr: format_lr(cell.lr),
            epochs: cell.epochs,
            seed: cell.seed,
        };
        let text = toml::to_string(&input).expect("fingerprint input serializes");
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn prune_for_seed(&self, seed: u64) -> Result<PrunedState> {
        let cfg = &self.cfg;
        let calibration = sample_calibration(
            &self.corpus,
            cfg.calibration.n_samples,
            cfg.calibration_seq_len()?,
            seed,
        )?;
        let mut model = self.dense.clone();
        prune_model(
            &mut model,
            &calibration.tokens,
            cfg.criterion()?,
            cfg.pattern()?,
            &cfg.sparsegpt()?,
        )?;
        let ppl_pruned = perplexity(&model, &self.holdout, Weights::Pruned)?;
        let mask_violations = model.mask_violations();
        Ok(PrunedState {
            seed,
            calibration,
            model,
            ppl_pruned,
            mask_violations,
        })
    }

    pub fn run_cell(&self, pruned: &PrunedState, cell: &Cell) -> Result<CellRun> {
        assert_eq!(
            pruned.seed, cell.seed,
            "pruned state belongs to another seed"
        );
        let cfg = &self.cfg;
        let opt = cfg.optim(cell.lr, cell.epochs, cell.seed);
        let mut model = pruned.model.clone();
        let tokens = &pruned.calibration.tokens;
        let outcomes: Vec<UnitOutcome> = match cell.kind {
            CellKind::Reconstruct {
                granularity,
                strategy,
                loss,
            } => {
                reconstruct_pruned(
                    &mut model,
                    tokens,
                    granularity,
                    strategy,
                    loss,
                    &opt,
                    cfg.reconstruct.train_norm_params,
                )?
                .units
            }
            CellKind::Retrain => vec![retrain_full(&mut model, tokens, &opt)?],
        };
        let ppl_reconstructed = perplexity(&model, &self.holdout, Weights::Pruned)?;
        let (granularity, strategy, loss) = cell.labels();
        let record = RunRecord {
            fingerprint: self.fingerprint(cell)?,
            model: model_label(&cfg.model),
            criterion: cfg.criterion()?.label().into(),
            pattern: cfg.pattern()?.label(),
            granularity,
            strategy,
            loss,
            lr: format_lr(cell.lr),
            epochs: cell.epochs,
            seed: cell.seed,
            ppl_dense: self.ppl_dense,
            ppl_pruned: pruned.ppl_pruned,
            ppl_reconstructed,
            recovery: recovery(self.ppl_dense, pruned.ppl_pruned, ppl_reconstructed),
            units: outcomes.len(),
            steps: outcomes.iter().map(|u| u.steps).sum(),
            initial_loss: outcomes.iter().map(|u| u.initial_loss).sum(),
            final_loss: outcomes.iter().map(|u| u.final_loss).sum(),
            degenerate: outcomes.iter().map(|u| u.degenerate).sum(),
            mask_violations: pruned.mask_violations + model.mask_violations(),
        };
        let trace = outcomes.into_iter().flat_map(|u| u.trace).collect();
        Ok(CellRun {
            record,
            trace,
            model,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SweepOptions {
    /// Stop after executing this many new cells.
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub executed: usize,
    pub skipped: usize,
    /// Records of every finished cell of the grid, executed or skipped.
    pub records: Vec<RunRecord>,
    /// Whether every cell of the grid is finished.
    pub complete: bool,
    pub summary: PathBuf,
}

/// Runs every unfinished cell of the grid under `out`, then writes the
/// summary. Cells whose record already exists are loaded instead of rerun;
/// a seed is pruned only if one of its cells needs to run.
pub fn run_sweep(ctx: &SweepContext, out: &Path, opts: SweepOptions) -> Result<SweepOutcome> {
    let cells = grid(&ctx.cfg)?;
    fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    write_atomic(&out.join("sweep.toml"), ctx.cfg.to_toml().as_bytes())?;
    let mut pruned: Option<PrunedState> = None;
    let (mut executed, mut skipped) = (0, 0);
    let mut records = Vec::with_capacity(cells.len());
    let mut complete = true;
    for cell in &cells {
        let fp = ctx.fingerprint(cell)?;
        let path = run_path(out, &fp);
        if path.exists() {
            records.push(read_run(&path)?);
            skipped += 1;
            continue;
        }
        if opts.limit.is_some_and(|l| executed >= l) {
            complete = false;
            continue;
        }
        if pruned.as_ref().map(|p| p.seed) != Some(cell.seed) {
            pruned = Some(ctx.prune_for_seed(cell.seed)?);
        }
        let run = ctx.run_cell(pruned.as_ref().expect("pruned above"), cell)?;
        if ctx.cfg.reconstruct.save_checkpoints {
            Checkpoint::new(run.model)
                .with_meta("fingerprint", fp.clone())
                .save(&out.join("checkpoints").join(format!("{fp}.ckpt")))?;
        }
        write_run(out, &run.record, &run.trace)?;
        records.push(run.record);
        executed += 1;
    }
    let model = ctx.cfg.model_config()?;
    let summary = write_summary(out, &records, Some(&model))?;
    Ok(SweepOutcome {
        executed,
        skipped,
        records,
        complete,
        summary,
    })
}
