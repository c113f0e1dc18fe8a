//! Layer-wise pruning and post-pruning reconstruction for small GPT-style decoders.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numerical piece of the
//! pipeline: a dense f64 tensor type with reverse-mode autodiff, a decoder-only
//! transformer with activation taps at every reconstruction boundary, mask selection
//! (magnitude, Wanda, SparseGPT-style OBS), local reconstruction under the dense,
//! sparse and mixed propagation strategies, full retraining, and the evaluation
//! metrics. File formats, configuration and the command line live in `recon-lab`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autograd;
pub mod criteria;
pub mod data;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prune;
pub mod recon;
pub mod tensor;
pub mod train;

mod math;

pub use error::{Error, Result};
pub use tensor::Tensor;
