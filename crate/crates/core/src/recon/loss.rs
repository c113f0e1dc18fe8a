use crate::autograd::{cosine_value, mse_value, Graph, NodeId};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReconLoss {
    /// Mean over all elements of the squared difference.
    Mse,
    /// One minus the mean cosine similarity of token vectors.
    Cosine,
}

impl ReconLoss {
    pub fn label(&self) -> &'static str {
        match self {
            ReconLoss::Mse => "mse",
            ReconLoss::Cosine => "cs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mse" => Some(ReconLoss::Mse),
            "cs" | "cos" | "cosine" => Some(ReconLoss::Cosine),
            _ => None,
        }
    }

    pub(crate) fn node(&self, g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
        match self {
            ReconLoss::Mse => g.mse(pred, target),
            ReconLoss::Cosine => g.cosine_loss(pred, target),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Token positions with a zero-norm vector, scored as orthogonal.
    pub degenerate: usize,
}

/// Loss between two `[tokens, features]` tensors.
pub fn loss_value(pred: &Tensor, target: &Tensor, loss: ReconLoss) -> Result<LossValue> {
    if pred.shape() != target.shape() {
        return Err(shape_err(
            "loss_value",
            alloc::format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    Ok(match loss {
        ReconLoss::Mse => LossValue {
            value: mse_value(pred.data(), target.data()),
            degenerate: 0,
        },
        ReconLoss::Cosine => {
            let (value, flags) = cosine_value(pred.data(), target.data(), pred.cols());
            LossValue {
                value,
                degenerate: flags.iter().filter(|&&d| d).count(),
            }
        }
    })
}
