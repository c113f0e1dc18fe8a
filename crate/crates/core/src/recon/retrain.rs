use alloc::vec::Vec;

use super::fit::{fit, FitTask, UnitOutcome};
use super::loss::LossValue;
use crate::autograd::Graph;
use crate::error::Result;
use crate::metrics::next_token_targets;
use crate::model::{Binder, GptModel, ParamRef, Tokens, Weights};
use crate::optim::OptimConfig;

/// End-to-end fine-tuning of the pruned model with next-token cross-entropy
/// on the calibration sequences.
///
/// Prunable matrices (masked), norms and the LM head are trained; embeddings
/// stay frozen. Norms and an untied head are shared with the dense view, so
/// callers wanting the dense model intact should retrain a copy.
pub fn retrain_full(
    model: &mut GptModel,
    tokens: &Tokens,
    opt: &OptimConfig,
) -> Result<UnitOutcome> {
    let mut params: Vec<ParamRef> = model.prunable_refs();
    params.extend(model.norm_refs());
    if model.lm_head.is_some() {
        params.push(ParamRef::LmHead);
    }
    let task = FitTask {
        unit: 0,
        label: "retrain".into(),
        params: &params,
        weights: Weights::Pruned,
        n_samples: tokens.batch,
    };
    let ce = |m: &GptModel, g: &mut Graph, binder: &mut Binder, samples: &[usize]| {
        let sub = tokens.select(samples);
        let logits = m.logits(g, binder, &sub)?;
        g.cross_entropy(logits, &next_token_targets(&sub))
    };
    fit(model, task, opt, ce, |m| {
        let mut g = Graph::new();
        let mut binder = Binder::frozen(m, Weights::Pruned);
        let all: Vec<usize> = (0..tokens.batch).collect();
        let root = ce(m, &mut g, &mut binder, &all)?;
        Ok(LossValue {
            value: g.value(root).data()[0],
            degenerate: 0,
        })
    })
}
