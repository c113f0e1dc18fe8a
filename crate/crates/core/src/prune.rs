//! Mask selection over a whole model.

use crate::criteria::feature_norms;
use crate::criteria::{
    score_magnitude, score_wanda_with_norms, select_mask, sparsegpt_prune_update, Criterion,
    SparseGptConfig, SparsityPattern,
};
use crate::error::Result;
use crate::model::{GptModel, MatrixKind, Tokens, Weights};

/// Chooses masks for every prunable matrix, replacing any previous pruning.
///
/// Calibration-based criteria visit blocks in depth order. Each block sees
/// the calibration set as produced by the already pruned earlier blocks; the
/// inputs of all six matrices of the block are captured in one pass with the
/// block still dense, then the block is pruned and run again to feed the next
/// one. SparseGPT installs its compensated weights as the pruned copy.
pub fn prune_model(
    model: &mut GptModel,
    tokens: &Tokens,
    criterion: Criterion,
    pattern: SparsityPattern,
    sparsegpt: &SparseGptConfig,
) -> Result<()> {
    pattern.check_columns(model.config.d_model)?;
    pattern.check_columns(model.config.d_ff)?;
    model.reset_pruning();
    if criterion == Criterion::Magnitude {
        for block in 0..model.config.n_blocks {
            for kind in MatrixKind::ALL {
                let m = model.matrix_mut(block, kind);
                let mask = select_mask(&score_magnitude(&m.dense), pattern)?;
                m.set_mask(mask)?;
            }
        }
        return Ok(());
    }
    let seq = tokens.seq;
    let mut x = model.embed_tokens(tokens)?;
    for block in 0..model.config.n_blocks {
        let (_, inputs) =
            model.run_sublayers(Weights::Pruned, &x, 2 * block, 2 * block + 2, seq)?;
        for kind in MatrixKind::ALL {
            let s = &inputs[usize::from(!kind.is_attention())];
            let input = if kind.reads_normed() {
                &s.normed
            } else {
                &s.inner
            };
            let m = model.matrix_mut(block, kind);
            match criterion {
                Criterion::Wanda => {
                    // Column norms of [tokens, d_in] are the row norms of X: d_in x B.
                    let norms = feature_norms(&input.transpose());
                    let mask = select_mask(&score_wanda_with_norms(&m.dense, &norms)?, pattern)?;
                    m.set_mask(mask)?;
                }
                Criterion::SparseGpt => {
                    let (mask, w_hat) =
                        sparsegpt_prune_update(&m.dense, &input.transpose(), pattern, sparsegpt)?;
                    m.set_pruned(mask, w_hat)?;
                }
                Criterion::Magnitude => unreachable!(),
            }
        }
        let (residual, _) =
            model.run_sublayers(Weights::Pruned, &x, 2 * block, 2 * block + 2, seq)?;
        x = residual.into_iter().next_back().expect("two sublayers");
    }
    Ok(())
}
