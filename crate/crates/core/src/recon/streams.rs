use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{Binder, ForwardTaps, GptModel, ReconUnit, TapId, Tokens, UnitScope, Weights};
use crate::tensor::Tensor;

/// Where a unit's inputs and targets come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PropagationStrategy {
    /// Dense inputs, dense targets.
    Dense,
    /// Sparse inputs, targets from the dense unit applied to them.
    Sparse,
    /// Sparse inputs, dense targets.
    Mixed,
}

impl PropagationStrategy {
    pub const ALL: [PropagationStrategy; 3] = [Self::Dense, Self::Sparse, Self::Mixed];

    pub fn label(&self) -> &'static str {
        match self {
            PropagationStrategy::Dense => "dp",
            PropagationStrategy::Sparse => "sp",
            PropagationStrategy::Mixed => "mp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dp" | "dense" => Some(Self::Dense),
            "sp" | "sparse" => Some(Self::Sparse),
            "mp" | "mixed" => Some(Self::Mixed),
            _ => None,
        }
    }
}

/// First sublayer touched by a unit.
pub(crate) fn first_sublayer(unit: &ReconUnit) -> usize {
    match unit.scope {
        UnitScope::Matrix { block, kind } => 2 * block + usize::from(!kind.is_attention()),
        UnitScope::Span { start, .. } => start,
    }
}

/// One past the last sublayer touched by a unit.
pub(crate) fn end_sublayer(unit: &ReconUnit) -> usize {
    match unit.scope {
        UnitScope::Matrix { .. } => first_sublayer(unit) + 1,
        UnitScope::Span { end, .. } => end,
    }
}

/// Activations of the calibration set under dense and pruned weights.
///
/// The dense stream is computed once. The sparse stream is kept current up
/// to a frontier: sublayers before it reflect the pruned weights as they are
/// now, later ones are stale until [`ActivationStreams::refresh`] reaches them.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStreams {
    pub seq: usize,
    pub dense: ForwardTaps,
    pub sparse: ForwardTaps,
    fresh: usize,
}

impl ActivationStreams {
    pub fn new(model: &GptModel, tokens: &Tokens) -> Result<Self> {
        Ok(Self {
            seq: tokens.seq,
            dense: model.forward_with_taps(tokens, Weights::Dense)?,
            sparse: model.forward_with_taps(tokens, Weights::Pruned)?,
            fresh: model.config.n_sublayers(),
        })
    }

    /// Number of leading sublayers whose sparse taps are current.
    pub fn fresh_sublayers(&self) -> usize {
        self.fresh
    }

    pub fn n_samples(&self) -> usize {
        self.dense.residual[0].rows() / self.seq
    }

    /// Marks sparse taps from sublayer `s` onward as stale.
    pub fn invalidate_from(&mut self, s: usize) {
        self.fresh = self.fresh.min(s);
    }

    /// Recomputes stale sparse taps up to sublayer `upto` (exclusive).
    pub fn refresh(&mut self, model: &GptModel, upto: usize) -> Result<()> {
        let upto = upto.min(model.config.n_sublayers());
        if self.fresh >= upto {
            return Ok(());
        }
        let start = self.fresh;
        let (residual, inputs) = model.run_sublayers(
            Weights::Pruned,
            &self.sparse.residual[start],
            start,
            upto,
            self.seq,
        )?;
        for (i, (r, s)) in residual.into_iter().zip(inputs).enumerate() {
            self.sparse.residual[start + i + 1] = r;
            self.sparse.sublayers[start + i] = s;
        }
        self.fresh = upto;
        Ok(())
    }

    /// Brings the sparse taps a unit reads up to date.
    pub fn prepare(&mut self, model: &GptModel, unit: &ReconUnit) -> Result<()> {
        match unit.scope {
            UnitScope::Matrix { .. } => self.refresh(model, end_sublayer(unit)),
            UnitScope::Span { start, .. } => self.refresh(model, start),
        }
    }

    /// Pushes the sparse stream through a unit whose weights just changed.
    pub fn advance(&mut self, model: &GptModel, unit: &ReconUnit) -> Result<()> {
        self.invalidate_from(first_sublayer(unit));
        self.refresh(model, end_sublayer(unit))
    }

    /// Activation at a tap of one stream.
    pub fn tap(&self, weights: Weights, tap: TapId) -> Result<&Tensor> {
        let (taps, fresh) = match weights {
            Weights::Dense => (&self.dense, usize::MAX),
            Weights::Pruned => (&self.sparse, self.fresh),
        };
        let missing = || {
            Error::MissingTap(format!(
                "{tap:?} ({weights:?} stream, {fresh} fresh sublayers)"
            ))
        };
        match tap {
            TapId::Residual(n) if n < taps.residual.len() && n <= fresh => Ok(&taps.residual[n]),
            TapId::MatrixInput { block, kind } => {
                let s = 2 * block + usize::from(!kind.is_attention());
                if s < taps.sublayers.len() && s < fresh {
                    Ok(taps.matrix_input(block, kind))
                } else {
                    Err(missing())
                }
            }
            _ => Err(missing()),
        }
    }
}

/// Inputs and targets of one unit, `[samples * seq, features]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub seq: usize,
}

impl UnitBatch {
    pub fn n_samples(&self) -> usize {
        self.inputs.rows() / self.seq
    }

    /// Rows of the chosen samples.
    pub fn select(&self, samples: &[usize]) -> (Tensor, Tensor) {
        let pick = |t: &Tensor| {
            let parts: Vec<Tensor> = samples
                .iter()
                .map(|&s| t.slice_rows(s * self.seq, self.seq))
                .collect();
            let refs: Vec<&Tensor> = parts.iter().collect();
            Tensor::concat_rows(&refs).expect("equal widths")
        };
        (pick(&self.inputs), pick(&self.targets))
    }
}

/// The unit as a graph on input node `x`.
pub(crate) fn unit_graph(
    model: &GptModel,
    g: &mut Graph,
    binder: &mut Binder,
    unit: &ReconUnit,
    x: NodeId,
    seq: usize,
) -> Result<NodeId> {
    match unit.scope {
        UnitScope::Matrix { block, kind } => model.linear(g, binder, block, kind, x),
        UnitScope::Span { start, end } => {
            let mut h = x;
            for s in start..end {
                h = model.sublayer(g, binder, s, h, seq)?.0;
            }
            Ok(h)
        }
    }
}

/// `f(x; θ)` for a unit under the chosen weights, without gradients.
pub fn unit_forward(
    model: &GptModel,
    unit: &ReconUnit,
    weights: Weights,
    x: &Tensor,
    seq: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut binder = Binder::frozen(model, weights);
    let input = g.constant(x.clone());
    let out = unit_graph(model, &mut g, &mut binder, unit, input, seq)?;
    Ok(g.take_value(out))
}

/// Inputs and targets for one unit.
///
/// Targets always come from the dense parameters of the unit: on the dense
/// input for DP and MP, on the sparse input for SP. Everything returned is a
/// plain tensor, so no gradient can reach upstream units.
pub fn build_unit_batch(
    streams: &ActivationStreams,
    model: &GptModel,
    unit: &ReconUnit,
    strategy: PropagationStrategy,
) -> Result<UnitBatch> {
    let dense_in = streams.tap(Weights::Dense, unit.input)?;
    let sparse_in = streams.tap(Weights::Pruned, unit.input)?;
    let seq = streams.seq;
    let target_of = |x: &Tensor| unit_forward(model, unit, Weights::Dense, x, seq);
    let (inputs, targets) = match strategy {
        PropagationStrategy::Dense => (dense_in.clone(), target_of(dense_in)?),
        PropagationStrategy::Sparse => (sparse_in.clone(), target_of(sparse_in)?),
        PropagationStrategy::Mixed => (sparse_in.clone(), target_of(dense_in)?),
    };
    Ok(UnitBatch {
        inputs,
        targets,
        seq,
    })
}
