use alloc::format;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    /// LayerNorm with gain and bias; the MLP uses GELU.
    LayerNorm,
    /// RMSNorm with gain only; the MLP uses SiLU.
    RmsNorm,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub norm_kind: NormKind,
    pub tie_lm_head: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_blocks", self.n_blocks),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of residual sublayers (attention and MLP per block).
    pub fn n_sublayers(&self) -> usize {
        2 * self.n_blocks
    }

    /// Parameters in the prunable matrices of one block.
    pub fn block_matrix_params(&self) -> usize {
        4 * self.d_model * self.d_model + 2 * self.d_model * self.d_ff
    }

    /// Parameters of one normalization layer.
    pub fn norm_params(&self) -> usize {
        match self.norm_kind {
            NormKind::LayerNorm => 2 * self.d_model,
            NormKind::RmsNorm => self.d_model,
        }
    }
}
