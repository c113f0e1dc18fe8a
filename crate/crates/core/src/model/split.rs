use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::config::{ModelConfig, NormKind};
use super::gpt::{MatrixKind, NormSite, ParamRef};
use crate::error::{Error, Result};

/// Scope of the submodel reconstructed at once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Granularity {
    PerMatrix,
    HalfBlock,
    Blocks(usize),
    FullDecoder,
}

impl Granularity {
    pub fn label(&self) -> String {
        match self {
            Granularity::PerMatrix => "per-matrix".into(),
            Granularity::HalfBlock => "half-block".into(),
            Granularity::Blocks(k) => format!("blocks-{k}"),
            Granularity::FullDecoder => "full-decoder".into(),
        }
    }

    /// Parses the labels produced by [`Granularity::label`]; `blocks:k` and a
    /// bare integer are accepted as well.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        match s {
            "per-matrix" | "matrix" => return Some(Granularity::PerMatrix),
            "half-block" | "half" | "0.5" => return Some(Granularity::HalfBlock),
            "full-decoder" | "full" => return Some(Granularity::FullDecoder),
            _ => {}
        }
        let k = s
            .strip_prefix("blocks-")
            .or_else(|| s.strip_prefix("blocks:"))
            .unwrap_or(s);
        k.parse().ok().filter(|&k| k > 0).map(Granularity::Blocks)
    }
}

/// Where a unit reads its input or writes its output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TapId {
    /// Residual stream after `n` sublayers (0 is the embedding output).
    Residual(usize),
    MatrixInput {
        block: usize,
        kind: MatrixKind,
    },
    MatrixOutput {
        block: usize,
        kind: MatrixKind,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnitScope {
    /// A single prunable matrix on its own input activation.
    Matrix { block: usize, kind: MatrixKind },
    /// Residual sublayers `[start, end)`.
    Span { start: usize, end: usize },
}

/// One slice of the model that is reconstructed as a unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconUnit {
    pub index: usize,
    pub scope: UnitScope,
    /// Trainable parameters, in depth order.
    pub params: Vec<ParamRef>,
    pub input: TapId,
    pub output: TapId,
    pub contains_residual: bool,
    pub train_norm_params: bool,
}

impl ReconUnit {
    pub fn label(&self) -> String {
        match self.scope {
            UnitScope::Matrix { block, kind } => format!("block{block}.{}", kind.name()),
            UnitScope::Span { start, end } if end == start + 1 => {
                let part = if start % 2 == 0 { "attn" } else { "mlp" };
                format!("block{}.{part}", start / 2)
            }
            UnitScope::Span { start, end } => format!("sublayers{start}-{end}"),
        }
    }

    /// Prunable matrices among the trainable parameters.
    pub fn matrices(&self) -> impl Iterator<Item = (usize, MatrixKind)> + '_ {
        self.params.iter().filter_map(|p| match p {
            ParamRef::Matrix { block, kind } => Some((*block, *kind)),
            _ => None,
        })
    }
}

fn span_params(config: &ModelConfig, start: usize, end: usize, norms: bool) -> Vec<ParamRef> {
    let mut params = Vec::new();
    for s in start..end {
        let block = s / 2;
        let (site, kinds): (NormSite, &[MatrixKind]) = if s % 2 == 0 {
            (NormSite::Attn(block), &MatrixKind::ALL[..4])
        } else {
            (NormSite::Mlp(block), &MatrixKind::ALL[4..])
        };
        if norms {
            params.push(ParamRef::NormGain(site));
            if config.norm_kind == NormKind::LayerNorm {
                params.push(ParamRef::NormBias(site));
            }
        }
        params.extend(kinds.iter().map(|&kind| ParamRef::Matrix { block, kind }));
    }
    params
}

/// Splits the decoder into reconstruction units, ordered by depth.
///
/// `Blocks(n_blocks)` and `FullDecoder` both produce a single span over all
/// blocks; in either case the embedding is frozen and the LM head lies
/// outside the unit.
pub fn split(
    config: &ModelConfig,
    granularity: Granularity,
    train_norm_params: bool,
) -> Result<Vec<ReconUnit>> {
    config.validate()?;
    let n = config.n_blocks;
    let spans: Vec<(usize, usize)> = match granularity {
        Granularity::PerMatrix => {
            let units = (0..n)
                .flat_map(|block| MatrixKind::ALL.into_iter().map(move |kind| (block, kind)))
                .enumerate()
                .map(|(index, (block, kind))| ReconUnit {
                    index,
                    scope: UnitScope::Matrix { block, kind },
                    params: Vec::from([ParamRef::Matrix { block, kind }]),
                    input: TapId::MatrixInput { block, kind },
                    output: TapId::MatrixOutput { block, kind },
                    contains_residual: false,
                    train_norm_params: false,
                })
                .collect();
            return Ok(units);
        }
        Granularity::HalfBlock => (0..2 * n).map(|s| (s, s + 1)).collect(),
        Granularity::Blocks(k) => {
            if k == 0 || k > n {
                return Err(Error::InvalidGranularity(format!(
                    "block size {k} outside 1..={n}"
                )));
            }
            (0..n)
                .step_by(k)
                .map(|b| (2 * b, 2 * (b + k).min(n)))
                .collect()
        }
        Granularity::FullDecoder => Vec::from([(0, 2 * n)]),
    };
    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(index, (start, end))| ReconUnit {
            index,
            scope: UnitScope::Span { start, end },
            params: span_params(config, start, end, train_norm_params),
            input: TapId::Residual(start),
            output: TapId::Residual(end),
            contains_residual: true,
            train_norm_params,
        })
        .collect())
}
