use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recon_lab::commands::{
    default_dense_checkpoint, eval_cmd, gen_corpus_cmd, prune_cmd, reconstruct_cmd, report_cmd,
    sweep_cmd, train_dense_cmd,
};
use recon_lab::config::{ExperimentConfig, Overrides};
use recon_lab::sweep::SweepOptions;
use recon_lab::{LabError, Result};

#[derive(Parser)]
#[command(
    name = "recon-lab",
    version,
    about = "Prune, reconstruct and evaluate small GPT decoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense model on the corpus and write its checkpoint.
    TrainDense(Common),
    /// Select masks for the dense checkpoint and write the pruned model.
    Prune(Common),
    /// Prune and reconstruct one configuration.
    Reconstruct(Common),
    /// Holdout perplexity of a checkpoint's dense and pruned weights.
    Eval(Common),
    /// Run every cell of the configured grid, skipping finished ones.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Stop after this many newly executed cells.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Rebuild summary.md from the run records in the output directory.
    Report(Common),
    /// Write a seeded synthetic text corpus.
    GenCorpus {
        /// Destination file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    granularity: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    loss: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    lr: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    epochs: Vec<usize>,
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long)]
    criterion: Option<String>,
    /// Checkpoint to read, or to write for train-dense and the outputs of
    /// prune and reconstruct.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&Overrides {
            corpus: self.corpus.clone(),
            out: self.out.clone(),
            seed: self.seed,
            granularity: self.granularity.clone(),
            strategy: self.strategy.clone(),
            loss: self.loss.clone(),
            lr: self.lr.clone(),
            epochs: self.epochs.clone(),
            pattern: self.pattern.clone(),
            criterion: self.criterion.clone(),
        });
        cfg.validate()?;
        Ok(cfg)
    }

    fn dense(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| default_dense_checkpoint(&cfg.out_dir()))
    }

    fn output(&self, cfg: &ExperimentConfig, name: &str) -> PathBuf {
        cfg.out_dir().join("checkpoints").join(name)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainDense(c) => {
            let cfg = c.resolve()?;
            let path = c.dense(&cfg);
            let t = train_dense_cmd(&cfg, &path)?;
            for l in &t.log {
                if let Some(p) = l.holdout_ppl {
                    println!(
                        "step {:>6}  loss {:.4}  lr {:.2e}  holdout ppl {p:.4}",
                        l.step, l.loss, l.lr
                    );
                }
            }
            println!("steps {}", t.log.len());
            println!(
                "holdout ppl {:.4} (unigram baseline {:.4})",
                t.holdout_ppl, t.unigram_ppl
            );
            println!("wrote {}", t.checkpoint.display());
        }
        Command::Prune(c) => {
            let cfg = c.resolve()?;
            let p = prune_cmd(&cfg, &c.dense(&cfg), &c.output(&cfg, "pruned.ckpt"))?;
            println!("density {:.4}", p.density);
            println!("ppl dense {:.4}  pruned {:.4}", p.ppl_dense, p.ppl_pruned);
            println!("wrote {}", p.checkpoint.display());
        }
        Command::Reconstruct(c) => {
            let cfg = c.resolve()?;
            let output = c.output(&cfg, "reconstructed.ckpt");
            let r = reconstruct_cmd(&cfg, &c.dense(&cfg), &output)?;
            println!("fingerprint {}", r.fingerprint);
            println!(
                "ppl dense {:.4}  pruned {:.4}  reconstructed {:.4}",
                r.ppl_dense, r.ppl_pruned, r.ppl_reconstructed
            );
            match r.recovery {
                Some(v) => println!("recovery {v:.4}"),
                None => println!("recovery undefined (pruned equals dense perplexity)"),
            }
            println!("wrote {}", output.display());
        }
        Command::Eval(c) => {
            let cfg = c.resolve()?;
            let e = eval_cmd(&cfg, &c.dense(&cfg))?;
            println!("density {:.4}", e.density);
            println!("ppl dense {:.4}  pruned {:.4}", e.ppl_dense, e.ppl_pruned);
            if let Some(v) = e.recovery {
                println!("recovery {v:.4}");
            }
        }
        Command::Sweep { common, limit } => {
            let cfg = common.resolve()?;
            let s = sweep_cmd(&cfg, &common.dense(&cfg), SweepOptions { limit })?;
            println!("executed {}  skipped {}", s.executed, s.skipped);
            if !s.complete {
                println!("stopped early; rerun to finish the grid");
            }
            println!("wrote {}", s.summary.display());
        }
        Command::Report(c) => {
            let cfg = match &c.config {
                Some(_) => Some(c.resolve()?),
                None => None,
            };
            let out = c
                .out
                .clone()
                .or_else(|| cfg.as_ref().map(|c| c.out_dir()))
                .unwrap_or_else(|| "out".into());
            let (path, n) = report_cmd(&out, cfg.as_ref())?;
            println!("{n} runs");
            println!("wrote {}", path.display());
        }
        Command::GenCorpus { out, bytes, seed } => {
            gen_corpus_cmd(&out, bytes, seed)?;
            println!("wrote {bytes} bytes to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let LabError::Core(recon_core::Error::NotPositiveDefinite { .. }) = e {
                eprintln!("hint: increase [prune] damping");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
