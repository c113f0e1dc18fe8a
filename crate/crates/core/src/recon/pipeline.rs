use alloc::vec::Vec;

use super::fit::{fit, FitTask, TraceRow, UnitOutcome};
use super::loss::{loss_value, ReconLoss};
use super::streams::{
    build_unit_batch, unit_forward, unit_graph, ActivationStreams, PropagationStrategy, UnitBatch,
};
use crate::criteria::{Criterion, SparseGptConfig, SparsityPattern};
use crate::error::Result;
use crate::model::{split, GptModel, Granularity, ReconUnit, Tokens, Weights};
use crate::optim::OptimConfig;
use crate::prune::prune_model;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub granularity: Granularity,
    pub strategy: PropagationStrategy,
    pub loss: ReconLoss,
    pub pattern: SparsityPattern,
    pub criterion: Criterion,
    pub sparsegpt: SparseGptConfig,
    pub opt: OptimConfig,
    pub train_norm_params: bool,
}

impl PipelineConfig {
    pub fn new(
        granularity: Granularity,
        strategy: PropagationStrategy,
        loss: ReconLoss,
        opt: OptimConfig,
    ) -> Self {
        Self {
            granularity,
            strategy,
            loss,
            pattern: SparsityPattern::Unstructured(0.5),
            criterion: Criterion::Wanda,
            sparsegpt: SparseGptConfig::default(),
            opt,
            train_norm_params: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineReport {
    pub units: Vec<UnitOutcome>,
}

impl PipelineReport {
    /// Every trace row of every unit, in processing order.
    pub fn trace(&self) -> impl Iterator<Item = &TraceRow> {
        self.units.iter().flat_map(|u| u.trace.iter())
    }

    /// Zero-norm token vectors seen by cosine losses across all units.
    pub fn degenerate(&self) -> usize {
        self.units.iter().map(|u| u.degenerate).sum()
    }
}

/// Trains the pruned parameters of one unit toward its targets.
pub fn reconstruct_unit(
    model: &mut GptModel,
    unit: &ReconUnit,
    batch: &UnitBatch,
    loss: ReconLoss,
    opt: &OptimConfig,
) -> Result<UnitOutcome> {
    let seq = batch.seq;
    let task = FitTask {
        unit: unit.index,
        label: unit.label(),
        params: &unit.params,
        weights: Weights::Pruned,
        n_samples: batch.n_samples(),
    };
    fit(
        model,
        task,
        opt,
        |m, g, binder, samples| {
            let (x, t) = batch.select(samples);
            let x = g.constant(x);
            let pred = unit_graph(m, g, binder, unit, x, seq)?;
            let t = g.constant(t);
            loss.node(g, pred, t)
        },
        |m| {
            let pred = unit_forward(m, unit, Weights::Pruned, &batch.inputs, seq)?;
            loss_value(&pred, &batch.targets, loss)
        },
    )
}

/// Reconstructs an already pruned model unit by unit, in depth order.
///
/// Dense activations are taken once up front. When norm parameters are
/// trained, targets come from a frozen copy of the model, because norms are
/// shared between the dense and pruned views.
pub fn reconstruct_pruned(
    model: &mut GptModel,
    tokens: &Tokens,
    granularity: Granularity,
    strategy: PropagationStrategy,
    loss: ReconLoss,
    opt: &OptimConfig,
    train_norm_params: bool,
) -> Result<PipelineReport> {
    let units = split(&model.config, granularity, train_norm_params)?;
    let reference = train_norm_params.then(|| model.clone());
    let mut streams = ActivationStreams::new(model, tokens)?;
    let mut report = PipelineReport::default();
    for unit in &units {
        streams.prepare(model, unit)?;
        let batch = build_unit_batch(
            &streams,
            reference.as_ref().unwrap_or(model),
            unit,
            strategy,
        )?;
        report
            .units
            .push(reconstruct_unit(model, unit, &batch, loss, opt)?);
        streams.advance(model, unit)?;
    }
    Ok(report)
}

/// Selects masks with the configured criterion, then reconstructs.
pub fn run_pipeline(
    model: &mut GptModel,
    tokens: &Tokens,
    config: &PipelineConfig,
) -> Result<PipelineReport> {
    prune_model(
        model,
        tokens,
        config.criterion,
        config.pattern,
        &config.sparsegpt,
    )?;
    reconstruct_pruned(
        model,
        tokens,
        config.granularity,
        config.strategy,
        config.loss,
        &config.opt,
        config.train_norm_params,
    )
}
