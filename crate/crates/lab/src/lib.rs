//! Checkpoints, experiment configuration, sweeps, reports and the command
//! line on top of `recon-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod report;
pub mod sweep;

pub use error::{LabError, Result};
