use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::LossValue;
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{Binder, GptModel, ParamRef, Weights};
use crate::optim::{AdamState, AdamW, LinearSchedule, OptimConfig};
use crate::tensor::Tensor;

/// Initial losses below this make a unit a no-op.
pub(crate) const NOOP_LOSS: f64 = 1e-12;

/// One row of a loss trace. Epoch 0 is the loss before any update.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub unit: usize,
    pub label: String,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitOutcome {
    pub unit: usize,
    pub label: String,
    /// Loss over all calibration samples before training.
    pub initial_loss: f64,
    /// Loss over all calibration samples after training.
    pub final_loss: f64,
    pub steps: usize,
    /// True when training was skipped (zero epochs or zero initial loss).
    pub skipped: bool,
    /// Zero-norm token vectors seen by the final cosine evaluation.
    pub degenerate: usize,
    pub trace: Vec<TraceRow>,
}

pub(crate) struct FitTask<'a> {
    pub unit: usize,
    pub label: String,
    pub params: &'a [ParamRef],
    pub weights: Weights,
    pub n_samples: usize,
}

fn shuffle_seed(seed: u64, unit: usize) -> u64 {
    seed ^ (unit as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Masked AdamW over mini-batches of calibration samples.
///
/// `batch_loss` builds the scalar loss of a subset of samples; `full_loss`
/// evaluates all samples without gradients. Gradients of masked matrices are
/// multiplied by the mask before the update, and pruned entries are forced
/// back to zero after it. A non-finite loss restores every parameter.
pub(crate) fn fit<F, E>(
    model: &mut GptModel,
    task: FitTask<'_>,
    opt: &OptimConfig,
    batch_loss: F,
    full_loss: E,
) -> Result<UnitOutcome>
where
    F: Fn(&GptModel, &mut Graph, &mut Binder, &[usize]) -> Result<NodeId>,
    E: Fn(&GptModel) -> Result<LossValue>,
{
    let non_finite = |step| Error::NonFiniteLoss {
        context: task.label.clone(),
        step,
    };
    let initial = full_loss(model)?;
    if !initial.value.is_finite() {
        return Err(non_finite(0));
    }
    let row = |epoch, loss, lr| TraceRow {
        unit: task.unit,
        label: task.label.clone(),
        epoch,
        loss,
        lr,
    };
    let mut outcome = UnitOutcome {
        unit: task.unit,
        label: task.label.clone(),
        initial_loss: initial.value,
        final_loss: initial.value,
        steps: 0,
        skipped: true,
        degenerate: initial.degenerate,
        trace: vec![row(0, initial.value, 0.0)],
    };
    if opt.epochs == 0 || initial.value < NOOP_LOSS || task.params.is_empty() {
        return Ok(outcome);
    }

    let refs: Vec<ParamRef> = {
        let mut r: Vec<ParamRef> = task.params.iter().map(|&p| model.canonical(p)).collect();
        r.sort();
        r.dedup();
        r
    };
    let snapshot: Vec<Tensor> = refs
        .iter()
        .map(|&r| model.param(r, task.weights).clone())
        .collect();
    let restore = |model: &mut GptModel| {
        for (&r, t) in refs.iter().zip(&snapshot) {
            *model.param_mut(r, task.weights) = t.clone();
        }
    };
    let adam = AdamW::from_config(opt);
    let mut states: Vec<AdamState> = snapshot.iter().map(|t| AdamState::new(t.len())).collect();
    let batch = opt.batch_size.max(1);
    let per_epoch = task.n_samples.div_ceil(batch);
    let schedule = LinearSchedule::new(opt.lr, opt.epochs * per_epoch, opt.warmup_frac);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(opt.seed, task.unit));
    let mut order: Vec<usize> = (0..task.n_samples).collect();
    let mut step = 0usize;

    for epoch in 1..=opt.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(batch) {
            let grads = {
                let mut g = Graph::new();
                let mut binder = Binder::new(model, task.weights, &refs);
                let root = batch_loss(model, &mut g, &mut binder, chunk)?;
                let value = g.value(root).data()[0];
                if !value.is_finite() {
                    drop(binder);
                    restore(model);
                    return Err(non_finite(step));
                }
                sum += value;
                g.backward(root)?;
                debug_assert!(g.leaves_with_grad().len() <= binder.leaves().len());
                binder
                    .leaves()
                    .iter()
                    .filter_map(|&(r, id)| g.grad(id).map(|gr| (r, gr.to_vec())))
                    .collect::<Vec<_>>()
            };
            lr = schedule.lr(step);
            for (r, mut grad) in grads {
                let i = refs
                    .binary_search(&r)
                    .expect("bound parameter is trainable");
                let mask = match task.weights {
                    Weights::Pruned => model.mask(r).cloned(),
                    Weights::Dense => None,
                };
                if let Some(m) = &mask {
                    grad.iter_mut().zip(m.data()).for_each(|(g, &m)| *g *= m);
                }
                let p = model.param_mut(r, task.weights).data_mut();
                adam.step(p, &grad, &mut states[i], lr);
                if let Some(m) = &mask {
                    p.iter_mut()
                        .zip(m.data())
                        .filter(|(_, &m)| m == 0.0)
                        .for_each(|(p, _)| *p = 0.0);
                }
            }
            step += 1;
        }
        outcome.trace.push(row(epoch, sum / per_epoch as f64, lr));
    }
    let last = full_loss(model)?;
    if !last.value.is_finite() {
        restore(model);
        return Err(non_finite(step));
    }
    outcome.final_loss = last.value;
    outcome.degenerate = last.degenerate;
    outcome.steps = step;
    outcome.skipped = false;
    Ok(outcome)
}
