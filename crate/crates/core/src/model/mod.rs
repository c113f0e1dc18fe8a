//! Decoder-only transformer with activation taps and the granularity splitter.

mod config;
mod gpt;
mod split;

pub use config::{ModelConfig, NormKind};
pub use gpt::{
    Binder, Block, ForwardTaps, GptModel, MatrixKind, Norm, NormSite, ParamRef, PrunableMatrix,
    SublayerInputs, Tokens, Weights,
};
pub use split::{split, Granularity, ReconUnit, TapId, UnitScope};
