//! Layer-wise and unit-wise reconstruction of pruned weights.

mod analytic;
mod fit;
mod loss;
mod pipeline;
mod retrain;
mod streams;

pub use analytic::analytic_matrix_recon;
pub use fit::{TraceRow, UnitOutcome};
pub use loss::{loss_value, LossValue, ReconLoss};
pub use pipeline::{
    reconstruct_pruned, reconstruct_unit, run_pipeline, PipelineConfig, PipelineReport,
};
pub use retrain::retrain_full;
pub use streams::{
    build_unit_batch, unit_forward, ActivationStreams, PropagationStrategy, UnitBatch,
};
