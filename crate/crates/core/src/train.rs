//! Dense language-model training from scratch.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::math;
use crate::metrics::{next_token_targets, perplexity};
use crate::model::{Binder, GptModel, ParamRef, Tokens, Weights};
use crate::optim::{AdamState, AdamW, LinearSchedule};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per step.
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Holdout evaluation period in steps; 0 disables evaluation.
    pub eval_every: usize,
    /// Stop once the holdout perplexity is at or below this value.
    pub target_ppl: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr: 3e-3,
            warmup_frac: 0.05,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            seed: 0,
            eval_every: 0,
            target_ppl: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub holdout_ppl: Option<f64>,
}

/// Every trainable tensor of the dense model.
pub fn dense_params(model: &GptModel) -> Vec<ParamRef> {
    let mut p = Vec::from([ParamRef::TokEmb, ParamRef::PosEmb]);
    p.extend(model.prunable_refs());
    p.extend(model.norm_refs());
    if model.lm_head.is_some() {
        p.push(ParamRef::LmHead);
    }
    p
}

/// Next-token training on random windows of `train`. The pruned copies are
/// reset to the trained dense weights at the end.
pub fn train_dense(
    model: &mut GptModel,
    train: &[usize],
    holdout: Option<&[usize]>,
    config: &TrainConfig,
) -> Result<Vec<TrainLog>> {
    let seq = model.config.seq_len;
    if train.len() < seq + 1 {
        return Err(Error::CorpusTooSmall {
            needed: seq + 1,
            available: train.len(),
        });
    }
    let params = dense_params(model);
    let adam = AdamW {
        betas: (0.9, 0.999),
        eps: 1e-8,
        weight_decay: config.weight_decay,
    };
    let mut states: Vec<AdamState> = params
        .iter()
        .map(|&r| AdamState::new(model.param(r, Weights::Dense).len()))
        .collect();
    let schedule = LinearSchedule::new(config.lr, config.steps, config.warmup_frac);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::new();
    for step in 0..config.steps {
        let ids: Vec<usize> = (0..config.batch_size)
            .flat_map(|_| {
                let start = rng.gen_range(0..=train.len() - seq);
                train[start..start + seq].iter().copied()
            })
            .collect();
        let tokens = Tokens::new(config.batch_size, seq, ids)?;
        let (loss, mut grads) = {
            let mut g = Graph::new();
            let mut binder = Binder::new(model, Weights::Dense, &params);
            let logits = model.logits(&mut g, &mut binder, &tokens)?;
            let root = g.cross_entropy(logits, &next_token_targets(&tokens))?;
            let loss = g.value(root).data()[0];
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: "dense training".into(),
                    step,
                });
            }
            g.backward(root)?;
            let grads: Vec<(ParamRef, Vec<f64>)> = binder
                .leaves()
                .iter()
                .filter_map(|&(r, id)| g.grad(id).map(|gr| (r, gr.to_vec())))
                .collect();
            (loss, grads)
        };
        if let Some(clip) = config.clip_norm {
            let norm = math::sqrt(
                grads
                    .iter()
                    .flat_map(|(_, g)| g.iter())
                    .map(|v| v * v)
                    .sum(),
            );
            if norm > clip {
                let s = clip / norm;
                grads
                    .iter_mut()
                    .flat_map(|(_, g)| g.iter_mut())
                    .for_each(|v| *v *= s);
            }
        }
        let lr = schedule.lr(step);
        for (r, grad) in grads {
            let i = params
                .iter()
                .position(|&p| model.canonical(p) == r)
                .expect("bound parameter");
            adam.step(
                model.param_mut(r, Weights::Dense).data_mut(),
                &grad,
                &mut states[i],
                lr,
            );
        }
        let mut entry = TrainLog {
            step,
            loss,
            lr,
            holdout_ppl: None,
        };
        let eval_now = config.eval_every > 0
            && ((step + 1) % config.eval_every == 0 || step + 1 == config.steps);
        if let (true, Some(h)) = (eval_now, holdout) {
            let ppl = perplexity(model, h, Weights::Dense)?;
            entry.holdout_ppl = Some(ppl);
            log.push(entry);
            if config.target_ppl.is_some_and(|t| ppl <= t) {
                break;
            }
        } else {
            log.push(entry);
        }
    }
    model.reset_pruning();
    Ok(log)
}

/// Perplexity of the unigram distribution of `train` on `holdout`, with
/// add-one smoothing over `vocab` symbols.
pub fn unigram_perplexity(train: &[usize], holdout: &[usize], vocab: usize) -> f64 {
    let mut counts = alloc::vec![1.0f64; vocab];
    for &t in train {
        counts[t] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let nll: f64 = holdout.iter().map(|&t| -math::ln(counts[t] / total)).sum();
    math::exp(nll / holdout.len() as f64)
}
