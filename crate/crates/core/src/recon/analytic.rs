use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::criteria::gram;
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Pivots below this fraction of the largest diagonal entry count as singular
/// when no ridge is applied.
const SINGULAR_TOL: f64 = 1e-12;

/// Row-wise least squares on a fixed support.
///
/// For every output row `i` with kept columns `S`, solves
/// `(X_S X_Sᵀ + εI) ŵ_S = (W_i X X_Sᵀ)ᵀ` and zeroes the rest. `x` is `d_in x B`.
pub fn analytic_matrix_recon(w: &Tensor, mask: &Tensor, x: &Tensor, ridge: f64) -> Result<Tensor> {
    let (rows, d_in) = (w.rows(), w.cols());
    if mask.shape() != w.shape() || x.rows() != d_in {
        return Err(Error::ShapeMismatch {
            op: "analytic_matrix_recon",
            detail: format!(
                "W {:?}, mask {:?}, X {:?}",
                w.shape(),
                mask.shape(),
                x.shape()
            ),
        });
    }
    let h = gram(x);
    let mut out = vec![0.0; rows * d_in];
    for i in 0..rows {
        let support: Vec<usize> = (0..d_in).filter(|&j| mask.at(i, j) != 0.0).collect();
        let k = support.len();
        if k == 0 {
            continue;
        }
        let wi = w.row(i);
        let mut normal = vec![0.0; k * k];
        let mut rhs = vec![0.0; k];
        for (a, &ja) in support.iter().enumerate() {
            for (b, &jb) in support.iter().enumerate() {
                normal[a * k + b] = h[ja * d_in + jb];
            }
            normal[a * k + a] += ridge;
            rhs[a] = (0..d_in).map(|j| wi[j] * h[j * d_in + ja]).sum();
        }
        let tol = if ridge > 0.0 { 0.0 } else { SINGULAR_TOL };
        let l = linalg::cholesky_with_tolerance(&normal, k, tol)
            .ok_or(Error::SingularNormalMatrix { row: i })?;
        linalg::cholesky_solve(&l, k, &mut rhs);
        for (a, &j) in support.iter().enumerate() {
            out[i * d_in + j] = rhs[a];
        }
    }
    Tensor::new(w.shape(), out)
}
