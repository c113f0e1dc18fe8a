//! Mask selection: magnitude, Wanda and a SparseGPT-style OBS pass.
//!
//! Activations follow the `d_in x B` orientation: one row per input feature,
//! one column per calibration token.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::kernels;
use crate::linalg;
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SparsityPattern {
    /// Fraction of weights removed, in (0, 1).
    Unstructured(f64),
    /// Exactly `n` kept out of every `m` consecutive inputs.
    SemiStructured { n: usize, m: usize },
}

impl SparsityPattern {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SparsityPattern::Unstructured(r) if !(r > 0.0 && r < 1.0) => Err(Error::Pattern(
                format!("unstructured ratio {r} outside (0, 1)"),
            )),
            SparsityPattern::SemiStructured { n, m } if n == 0 || n >= m => {
                Err(Error::Pattern(format!("{n}:{m} needs 0 < n < m")))
            }
            _ => Ok(()),
        }
    }

    /// Checks the pattern against a matrix with `d_in` input columns.
    pub fn check_columns(&self, d_in: usize) -> Result<()> {
        self.validate()?;
        if let SparsityPattern::SemiStructured { n, m } = *self {
            if d_in % m != 0 {
                return Err(Error::Pattern(format!(
                    "{n}:{m} needs the input dimension {d_in} divisible by {m}"
                )));
            }
        }
        Ok(())
    }

    /// Fraction of weights removed.
    pub fn sparsity(&self) -> f64 {
        match *self {
            SparsityPattern::Unstructured(r) => r,
            SparsityPattern::SemiStructured { n, m } => 1.0 - n as f64 / m as f64,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            SparsityPattern::Unstructured(r) => format!("unstructured-{r}"),
            SparsityPattern::SemiStructured { n, m } => format!("{n}:{m}"),
        }
    }

    /// Accepts `n:m`, `unstructured-r`, `r` or `p%`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Some((n, m)) = s.split_once(':') {
            let p = SparsityPattern::SemiStructured {
                n: n.trim().parse().ok()?,
                m: m.trim().parse().ok()?,
            };
            return p.validate().ok().map(|_| p);
        }
        let body = s.strip_prefix("unstructured-").unwrap_or(s);
        let r = match body.strip_suffix('%') {
            Some(p) => p.trim().parse::<f64>().ok()? / 100.0,
            None => body.parse::<f64>().ok()?,
        };
        let p = SparsityPattern::Unstructured(r);
        p.validate().ok().map(|_| p)
    }
}

/// Set of scores competing for the kept slots under unstructured sparsity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComparisonGroup {
    PerMatrix,
    PerOutputRow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriterionScore {
    pub scores: Tensor,
    pub group: ComparisonGroup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Criterion {
    Magnitude,
    Wanda,
    SparseGpt,
}

impl Criterion {
    pub fn label(&self) -> &'static str {
        match self {
            Criterion::Magnitude => "magnitude",
            Criterion::Wanda => "wanda",
            Criterion::SparseGpt => "sparsegpt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "magnitude" => Some(Criterion::Magnitude),
            "wanda" => Some(Criterion::Wanda),
            "sparsegpt" => Some(Criterion::SparseGpt),
            _ => None,
        }
    }
}

/// `|W|`, compared within each output row.
pub fn score_magnitude(w: &Tensor) -> CriterionScore {
    CriterionScore {
        scores: w.map(f64::abs),
        group: ComparisonGroup::PerOutputRow,
    }
}

/// Euclidean norm of every row of a `d_in x B` activation matrix.
pub fn feature_norms(x: &Tensor) -> Vec<f64> {
    (0..x.rows())
        .map(|j| math::sqrt(x.row(j).iter().map(|v| v * v).sum()))
        .collect()
}

/// `|W[i,j]| · ‖X[j,·]‖₂`, compared within each output row.
pub fn score_wanda(w: &Tensor, x: &Tensor) -> Result<CriterionScore> {
    if x.rows() != w.cols() {
        return Err(Error::ShapeMismatch {
            op: "score_wanda",
            detail: format!("W has {} inputs, X has {} rows", w.cols(), x.rows()),
        });
    }
    score_wanda_with_norms(w, &feature_norms(x))
}

/// Wanda scores from precomputed input-feature norms.
pub fn score_wanda_with_norms(w: &Tensor, norms: &[f64]) -> Result<CriterionScore> {
    if norms.len() != w.cols() {
        return Err(Error::ShapeMismatch {
            op: "score_wanda",
            detail: format!("W has {} inputs, {} norms", w.cols(), norms.len()),
        });
    }
    let c = w.cols();
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v.abs() * norms[i % c])
        .collect();
    Ok(CriterionScore {
        scores: Tensor::from_parts(w.shape().to_vec(), data),
        group: ComparisonGroup::PerOutputRow,
    })
}

/// Number of entries kept out of `size` at removal ratio `ratio`:
/// `⌈(1 − ratio) · size⌉`, guarded against round-off just above an integer.
pub fn keep_count(ratio: f64, size: usize) -> usize {
    let exact = (1.0 - ratio) * size as f64;
    (math::ceil(exact - 1e-9) as usize).min(size)
}

/// Descending by score; lower index wins ties.
fn rank(scores: &[f64], indices: &mut [usize]) {
    indices.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
}

/// Marks the `keep` best of `indices` (positions into `scores`) in `mask`.
fn keep_top(scores: &[f64], mut indices: Vec<usize>, keep: usize, mask: &mut [f64]) {
    rank(scores, &mut indices);
    for &i in indices.iter().take(keep) {
        mask[i] = 1.0;
    }
}

/// Binary mask keeping the highest scores under `pattern`.
pub fn select_mask(score: &CriterionScore, pattern: SparsityPattern) -> Result<Tensor> {
    let s = &score.scores;
    let (rows, cols) = (s.rows(), s.cols());
    pattern.check_columns(cols)?;
    if !s.all_finite() {
        return Err(Error::Pattern("scores must be finite".into()));
    }
    let data = s.data();
    let mut mask = vec![0.0; data.len()];
    match pattern {
        SparsityPattern::Unstructured(r) => match score.group {
            ComparisonGroup::PerMatrix => {
                keep_top(
                    data,
                    (0..data.len()).collect(),
                    keep_count(r, data.len()),
                    &mut mask,
                );
            }
            ComparisonGroup::PerOutputRow => {
                let keep = keep_count(r, cols);
                for i in 0..rows {
                    keep_top(data, (i * cols..(i + 1) * cols).collect(), keep, &mut mask);
                }
            }
        },
        SparsityPattern::SemiStructured { n, m } => {
            for i in 0..rows {
                for g in (0..cols).step_by(m) {
                    let start = i * cols + g;
                    keep_top(data, (start..start + m).collect(), n, &mut mask);
                }
            }
        }
    }
    Ok(Tensor::from_parts(s.shape().to_vec(), mask))
}

/// `‖W X − Ŵ X‖²_F` for `X: d_in x B`.
pub fn layer_objective(w: &Tensor, w_hat: &Tensor, x: &Tensor) -> f64 {
    let diff: Vec<f64> = w
        .data()
        .iter()
        .zip(w_hat.data())
        .map(|(a, b)| a - b)
        .collect();
    let prod = kernels::gemm_nn(&diff, x.data(), w.rows(), w.cols(), x.cols());
    prod.iter().map(|v| v * v).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Damping {
    /// Multiple of the mean diagonal of `X Xᵀ`.
    Relative(f64),
    Absolute(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseGptConfig {
    pub damping: Damping,
    /// Columns per mask-selection block.
    pub block_size: usize,
}

impl Default for SparseGptConfig {
    fn default() -> Self {
        Self {
            damping: Damping::Relative(0.01),
            block_size: 4,
        }
    }
}

/// `X Xᵀ` for `X: d_in x B`.
pub fn gram(x: &Tensor) -> Vec<f64> {
    kernels::gemm_nt(x.data(), x.data(), x.rows(), x.cols(), x.rows())
}

/// Column-blocked OBS pruning with weight compensation.
///
/// With `H = X Xᵀ + λI` and `U` the upper Cholesky factor of `H⁻¹`, columns are
/// visited left to right. At the start of each block of `block_size` columns
/// the mask of that block is chosen from the OBS scores `w² / U_jj²` of the
/// current (already compensated) weights; for unstructured patterns every row
/// keeps exactly `⌈(1 − r) · d_in⌉` weights overall, ranked against all its
/// not-yet-visited columns. For `n:m` patterns each group of `m` is decided when
/// its first column is reached. Each pruned column's error is then pushed onto
/// the remaining columns through row `i` of `U`.
pub fn sparsegpt_prune_update(
    w: &Tensor,
    x: &Tensor,
    pattern: SparsityPattern,
    config: &SparseGptConfig,
) -> Result<(Tensor, Tensor)> {
    let (rows, d_in) = (w.rows(), w.cols());
    if x.rows() != d_in {
        return Err(Error::ShapeMismatch {
            op: "sparsegpt",
            detail: format!("W has {d_in} inputs, X has {} rows", x.rows()),
        });
    }
    pattern.check_columns(d_in)?;
    let mut h = gram(x);
    let lambda = match config.damping {
        Damping::Relative(p) => p * (0..d_in).map(|j| h[j * d_in + j]).sum::<f64>() / d_in as f64,
        Damping::Absolute(a) => a,
    };
    for j in 0..d_in {
        h[j * d_in + j] += lambda;
    }
    let not_pd = || Error::NotPositiveDefinite { damping: lambda };
    let l = linalg::cholesky(&h, d_in).ok_or_else(not_pd)?;
    let hinv = linalg::cholesky_inverse(&l, d_in);
    let lh = linalg::cholesky(&hinv, d_in).ok_or_else(not_pd)?;
    // Upper factor: U[i][j] = lh[j][i].
    let u = |i: usize, j: usize| lh[j * d_in + i];
    let diag: Vec<f64> = (0..d_in).map(|j| u(j, j)).collect();

    let mut work = w.data().to_vec();
    let mut mask = vec![1.0; work.len()];
    let block = config.block_size.max(1);
    let keep_row = match pattern {
        SparsityPattern::Unstructured(r) => keep_count(r, d_in),
        SparsityPattern::SemiStructured { .. } => 0,
    };
    let mut kept = vec![0usize; rows];
    let mut scores = vec![0.0; d_in];

    for i1 in (0..d_in).step_by(block) {
        let i2 = (i1 + block).min(d_in);
        if let SparsityPattern::Unstructured(_) = pattern {
            for r in 0..rows {
                let row = &work[r * d_in..(r + 1) * d_in];
                for j in i1..d_in {
                    scores[j] = row[j] * row[j] / (diag[j] * diag[j]);
                }
                let need = keep_row - kept[r];
                let mut idx: Vec<usize> = (i1..d_in).collect();
                rank(&scores, &mut idx);
                for j in i1..i2 {
                    mask[r * d_in + j] = 0.0;
                }
                for &j in idx.iter().take(need) {
                    if j < i2 {
                        mask[r * d_in + j] = 1.0;
                        kept[r] += 1;
                    }
                }
            }
        }
        for i in i1..i2 {
            if let SparsityPattern::SemiStructured { n, m } = pattern {
                if i % m == 0 {
                    for r in 0..rows {
                        let row = &work[r * d_in..(r + 1) * d_in];
                        for j in i..i + m {
                            scores[j] = row[j] * row[j] / (diag[j] * diag[j]);
                            mask[r * d_in + j] = 0.0;
                        }
                        let mut idx: Vec<usize> = (i..i + m).collect();
                        rank(&scores, &mut idx);
                        for &j in idx.iter().take(n) {
                            mask[r * d_in + j] = 1.0;
                        }
                    }
                }
            }
            let d = diag[i];
            for r in 0..rows {
                if mask[r * d_in + i] != 0.0 {
                    continue;
                }
                let row = &mut work[r * d_in..(r + 1) * d_in];
                let err = row[i] / d;
                for j in i + 1..d_in {
                    row[j] -= err * u(i, j);
                }
                row[i] = 0.0;
            }
        }
    }
    let shape = w.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), mask),
        Tensor::from_parts(shape, work),
    ))
}
