//! Perplexity, recovery, paired recovery differences and a peak-memory model.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{log_softmax_at, Graph};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{split, Binder, GptModel, Granularity, ModelConfig, Tokens, UnitScope, Weights};
use crate::tensor::Tensor;

/// Next-token targets for every position; the last position of each sequence
/// has none.
pub fn next_token_targets(tokens: &Tokens) -> Vec<Option<usize>> {
    (0..tokens.batch)
        .flat_map(|b| {
            let row = tokens.row(b);
            (0..tokens.seq).map(move |t| row.get(t + 1).copied())
        })
        .collect()
}

/// Summed negative log-likelihood and count over rows of `[rows, vocab]`.
pub fn nll_sum(logits: &Tensor, targets: &[Option<usize>]) -> Result<(f64, usize)> {
    let v = logits.cols();
    let mut sum = 0.0;
    let mut count = 0;
    for (row, t) in logits.data().chunks(v).zip(targets) {
        if let Some(t) = *t {
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
            sum -= log_softmax_at(row, t);
            count += 1;
        }
    }
    Ok((sum, count))
}

/// Windows evaluated per forward pass.
const EVAL_CHUNK: usize = 8;

/// `exp` of the mean next-token NLL over non-overlapping windows of
/// `seq_len` tokens. A trailing partial window is dropped.
pub fn perplexity(model: &GptModel, holdout: &[usize], weights: Weights) -> Result<f64> {
    let seq = model.config.seq_len;
    let windows = holdout.len() / seq;
    if windows == 0 || seq < 2 {
        return Err(Error::HoldoutTooShort {
            len: holdout.len(),
            seq_len: seq,
        });
    }
    let mut sum = 0.0;
    let mut count = 0;
    for start in (0..windows).step_by(EVAL_CHUNK) {
        let n = EVAL_CHUNK.min(windows - start);
        let tokens = Tokens::new(n, seq, holdout[start * seq..(start + n) * seq].to_vec())?;
        let mut g = Graph::new();
        let mut binder = Binder::frozen(model, weights);
        let logits = model.logits(&mut g, &mut binder, &tokens)?;
        let (s, c) = nll_sum(g.value(logits), &next_token_targets(&tokens))?;
        sum += s;
        count += c;
    }
    Ok(math::exp(sum / count as f64))
}

/// Fraction of the pruned-to-dense perplexity gap closed by reconstruction;
/// `None` when the gap is zero.
pub fn recovery(ppl_dense: f64, ppl_pruned: f64, ppl_reconstructed: f64) -> Option<f64> {
    let gap = ppl_pruned - ppl_dense;
    (gap != 0.0 && gap.is_finite()).then(|| (ppl_pruned - ppl_reconstructed) / gap)
}

/// Settings that identify one reconstruction run.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RunKey {
    pub model: String,
    pub pattern: String,
    pub criterion: String,
    pub granularity: String,
    pub strategy: String,
    pub loss: String,
    /// Learning rate in its canonical decimal spelling.
    pub lr: String,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompareAxis {
    Strategy,
    Loss,
}

impl RunKey {
    fn axis(&self, axis: CompareAxis) -> &str {
        match axis {
            CompareAxis::Strategy => &self.strategy,
            CompareAxis::Loss => &self.loss,
        }
    }

    /// The key with the compared axis blanked out.
    fn without(&self, axis: CompareAxis) -> RunKey {
        let mut k = self.clone();
        match axis {
            CompareAxis::Strategy => k.strategy.clear(),
            CompareAxis::Loss => k.loss.clear(),
        }
        k
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryReport {
    pub key: RunKey,
    pub ppl_dense: f64,
    pub ppl_pruned: f64,
    pub ppl_reconstructed: f64,
    pub recovery: Option<f64>,
}

impl RecoveryReport {
    pub fn new(key: RunKey, ppl_dense: f64, ppl_pruned: f64, ppl_reconstructed: f64) -> Self {
        Self {
            key,
            ppl_dense,
            ppl_pruned,
            ppl_reconstructed,
            recovery: recovery(ppl_dense, ppl_pruned, ppl_reconstructed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    /// Runs equal in every setting except the compared axis.
    IdenticalConfig,
    /// Best recovery of each side per (model, pattern).
    BestPerModelSparsity,
}

/// `first − second` recovery for one matched pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDiff {
    pub first: RunKey,
    pub second: RunKey,
    pub diff: f64,
}

/// Paired recovery differences between two values of one axis, ordered
/// deterministically. Runs with undefined recovery are ignored; no valid
/// pair yields an empty list.
pub fn recovery_diffs(
    runs: &[RecoveryReport],
    axis: CompareAxis,
    first: &str,
    second: &str,
    pairing: Pairing,
) -> Vec<PairedDiff> {
    let valid = |side: &str| -> Vec<(&RunKey, f64)> {
        runs.iter()
            .filter_map(|r| {
                r.recovery
                    .filter(|_| r.key.axis(axis) == side)
                    .map(|v| (&r.key, v))
            })
            .collect()
    };
    match pairing {
        Pairing::IdenticalConfig => {
            let mut out = Vec::new();
            let second_runs = valid(second);
            for (ka, va) in valid(first) {
                for &(kb, vb) in &second_runs {
                    if ka.without(axis) == kb.without(axis) {
                        out.push(PairedDiff {
                            first: ka.clone(),
                            second: kb.clone(),
                            diff: va - vb,
                        });
                    }
                }
            }
            out.sort_by(|a, b| a.first.cmp(&b.first).then(a.second.cmp(&b.second)));
            out
        }
        Pairing::BestPerModelSparsity => {
            let best = |side: &str| {
                let mut m: BTreeMap<(String, String), (&RunKey, f64)> = BTreeMap::new();
                for (k, v) in valid(side) {
                    let e = m
                        .entry((k.model.clone(), k.pattern.clone()))
                        .or_insert((k, v));
                    if v > e.1 {
                        *e = (k, v);
                    }
                }
                m
            };
            let (a, b) = (best(first), best(second));
            a.iter()
                .filter_map(|(group, (ka, va))| {
                    b.get(group).map(|(kb, vb)| PairedDiff {
                        first: (*ka).clone(),
                        second: (*kb).clone(),
                        diff: va - vb,
                    })
                })
                .collect()
        }
    }
}

/// Equal-width histogram over `[lo, hi)`; values outside land in the edge bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let mut counts = vec![0; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values.iter().filter(|v| v.is_finite()) {
            let i = math::floor((v - lo) / width);
            let i = if i < 0.0 {
                0
            } else {
                (i as usize).min(bins - 1)
            };
            counts[i] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + w * i as f64, self.lo + w * (i + 1) as f64)
    }
}

/// Analytic peak-memory model of the largest reconstruction unit, in f64s.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryEstimate {
    pub trainable_params: usize,
    pub frozen_params: usize,
    /// Gradient plus two Adam moments per trainable parameter.
    pub optimizer_state_floats: usize,
    pub activation_floats: usize,
    pub peak_bytes: usize,
}

impl MemoryEstimate {
    fn new(trainable: usize, frozen: usize, activations: usize) -> Self {
        Self {
            trainable_params: trainable,
            frozen_params: frozen,
            optimizer_state_floats: 3 * trainable,
            activation_floats: activations,
            peak_bytes: 8 * (4 * trainable + frozen + activations),
        }
    }
}

/// Forward activations stored by one sublayer for `tokens` rows in sequences
/// of `seq`.
fn sublayer_activations(c: &ModelConfig, s: usize, tokens: usize, seq: usize) -> usize {
    let d = c.d_model;
    if s % 2 == 0 {
        // Residual in, normed, q, k, v, context, projection, plus scores and
        // probabilities per head.
        let batch = tokens.div_ceil(seq);
        7 * tokens * d + 2 * batch * c.n_heads * seq * seq
    } else {
        // Residual in, normed, projection, pre- and post-activation hidden.
        3 * tokens * d + 2 * tokens * c.d_ff
    }
}

fn matrix_shape(c: &ModelConfig, kind: crate::model::MatrixKind) -> (usize, usize) {
    use crate::model::MatrixKind::*;
    match kind {
        Query | Key | Value | Output => (c.d_model, c.d_model),
        Up => (c.d_ff, c.d_model),
        Down => (c.d_model, c.d_ff),
    }
}

/// Peak memory of the largest unit for mini-batches of `batch_size`
/// sequences of `config.seq_len` tokens.
pub fn estimate_peak_memory_with(
    config: &ModelConfig,
    granularity: Granularity,
    batch_size: usize,
) -> Result<MemoryEstimate> {
    let units = split(config, granularity, false)?;
    let seq = config.seq_len;
    let tokens = batch_size.max(1) * seq;
    let estimate = |scope: UnitScope| match scope {
        UnitScope::Matrix { kind, .. } => {
            let (out, inp) = matrix_shape(config, kind);
            // Input, output and target.
            MemoryEstimate::new(out * inp, 0, tokens * (inp + 2 * out))
        }
        UnitScope::Span { start, end } => {
            let trainable = (start..end)
                .map(|s| {
                    if s % 2 == 0 {
                        4 * config.d_model * config.d_model
                    } else {
                        2 * config.d_model * config.d_ff
                    }
                })
                .sum::<usize>();
            let frozen = (end - start) * config.norm_params();
            let acts = (start..end)
                .map(|s| sublayer_activations(config, s, tokens, seq))
                .sum::<usize>()
                + 2 * tokens * config.d_model;
            MemoryEstimate::new(trainable, frozen, acts)
        }
    };
    Ok(units
        .iter()
        .map(|u| estimate(u.scope))
        .max_by_key(|e| e.peak_bytes)
        .expect("at least one unit"))
}

/// [`estimate_peak_memory_with`] at the default mini-batch of two sequences.
pub fn estimate_peak_memory(
    config: &ModelConfig,
    granularity: Granularity,
) -> Result<MemoryEstimate> {
    estimate_peak_memory_with(config, granularity, 2)
}
