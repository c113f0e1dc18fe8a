use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recon_core::autograd::{Graph, NodeId};
use recon_core::metrics::next_token_targets;
use recon_core::model::{
    Binder, GptModel, MatrixKind, ModelConfig, NormKind, ParamRef, Tokens, Weights,
};
use recon_core::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-4)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Builds `op` on the inputs (all differentiable) and contracts a non-scalar
/// output with a fixed random tensor. Every input entry is checked.
fn check_op(name: &str, inputs: Vec<Tensor>, op: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval =
        |inputs: &[Tensor], track: bool, proj: Option<&Tensor>| -> (f64, Vec<Vec<f64>>, Tensor) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = inputs
                .iter()
                .map(|t| {
                    if track {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect();
            let out = op(&mut g, &ids);
            let out_value = g.value(out).clone();
            let root = if out_value.is_scalar() {
                out
            } else {
                let r = g.constant(
                    proj.cloned()
                        .unwrap_or_else(|| Tensor::ones(out_value.shape())),
                );
                let m = g.mul(out, r).unwrap();
                g.sum(m)
            };
            let value = g.value(root).data()[0];
            let grads = if track {
                g.backward(root).unwrap();
                ids.iter()
                    .map(|&i| g.grad(i).map(<[f64]>::to_vec).unwrap_or_default())
                    .collect()
            } else {
                Vec::new()
            };
            (value, grads, out_value)
        };
    let (_, _, out) = eval(&inputs, false, None);
    let proj = random(&mut rng, out.shape(), -1.0, 1.0);
    let (_, grads, _) = eval(&inputs, true, Some(&proj));
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= H;
            let fd = (eval(&plus, false, Some(&proj)).0 - eval(&minus, false, Some(&proj)).0)
                / (2.0 * H);
            let a = grads[i].get(k).copied().unwrap_or(0.0);
            worst = worst.max(rel_err(a, fd));
        }
    }
    assert!(worst <= TOL, "{name}: relative error {worst:e}");
}

#[test]
fn every_op_matches_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut r, &[3, 4], -1.0, 1.0);
    let b = random(&mut r, &[4, 2], -1.0, 1.0);
    let w = random(&mut r, &[5, 4], -1.0, 1.0);
    let c = random(&mut r, &[3, 4], -1.0, 1.0);
    let v4 = random(&mut r, &[4], 0.5, 1.5);
    let bias = random(&mut r, &[4], -0.5, 0.5);

    check_op("matmul", vec![a.clone(), b.clone()], |g, x| {
        g.matmul(x[0], x[1]).unwrap()
    });
    check_op("linear", vec![a.clone(), w.clone()], |g, x| {
        g.linear(x[0], x[1]).unwrap()
    });
    check_op("add", vec![a.clone(), c.clone()], |g, x| {
        g.add(x[0], x[1]).unwrap()
    });
    check_op("sub", vec![a.clone(), c.clone()], |g, x| {
        g.sub(x[0], x[1]).unwrap()
    });
    check_op("mul", vec![a.clone(), c.clone()], |g, x| {
        g.mul(x[0], x[1]).unwrap()
    });
    check_op("add_bias", vec![a.clone(), bias.clone()], |g, x| {
        g.add_bias(x[0], x[1]).unwrap()
    });
    check_op("scale", vec![a.clone()], |g, x| g.scale(x[0], -1.7));
    check_op("transpose", vec![a.clone()], |g, x| {
        g.transpose(x[0]).unwrap()
    });
    check_op("softmax", vec![a.clone()], |g, x| g.softmax(x[0]));
    check_op(
        "layernorm",
        vec![a.clone(), v4.clone(), bias.clone()],
        |g, x| g.layernorm(x[0], x[1], x[2]).unwrap(),
    );
    check_op("rmsnorm", vec![a.clone(), v4.clone()], |g, x| {
        g.rmsnorm(x[0], x[1]).unwrap()
    });
    check_op("gelu", vec![a.clone()], |g, x| g.gelu(x[0]));
    check_op("silu", vec![a.clone()], |g, x| g.silu(x[0]));
    check_op("embed", vec![w.clone()], |g, x| {
        g.embed(x[0], &[4, 0, 4, 2]).unwrap()
    });
    check_op("reshape", vec![a.clone()], |g, x| {
        g.reshape(x[0], &[2, 6]).unwrap()
    });
    check_op("slice", vec![a.clone()], |g, x| {
        g.slice(x[0], 1, 1, 2, 3).unwrap()
    });
    check_op("concat_cols", vec![a.clone(), c.clone()], |g, x| {
        g.concat_cols(&[x[0], x[1]]).unwrap()
    });
    check_op("concat_rows", vec![a.clone(), w.clone()], |g, x| {
        g.concat_rows(&[x[0], x[1]]).unwrap()
    });
    check_op("sum", vec![a.clone()], |g, x| g.sum(x[0]));
    check_op("mse", vec![a.clone(), c.clone()], |g, x| {
        g.mse(x[0], x[1]).unwrap()
    });
    check_op("cosine_loss", vec![a.clone(), c.clone()], |g, x| {
        g.cosine_loss(x[0], x[1]).unwrap()
    });
    check_op("cross_entropy", vec![a.clone()], |g, x| {
        g.cross_entropy(x[0], &[Some(1), None, Some(3)]).unwrap()
    });

    let mask = Tensor::new(&[3, 4], (0..12).map(|i| f64::from(i % 3 != 1)).collect()).unwrap();
    check_op("mask_mul", vec![a.clone()], move |g, x| {
        let m = g.constant(mask.clone());
        g.mask_mul(x[0], m).unwrap()
    });
}

#[test]
fn composite_chain_matches_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut r, &[4, 6], -1.0, 1.0);
    let w1 = random(&mut r, &[5, 6], -0.5, 0.5);
    let w2 = random(&mut r, &[6, 5], -0.5, 0.5);
    let gamma = random(&mut r, &[6], 0.5, 1.5);
    let beta = random(&mut r, &[6], -0.2, 0.2);
    check_op("chain", vec![x, w1, w2, gamma, beta], |g, p| {
        let n = g.layernorm(p[0], p[3], p[4]).unwrap();
        let h = g.linear(n, p[1]).unwrap();
        let h = g.gelu(h);
        let o = g.linear(h, p[2]).unwrap();
        let o = g.add(o, p[0]).unwrap();
        let t = g.transpose(o).unwrap();
        let s = g.matmul(o, t).unwrap();
        g.softmax(s)
    });
}

fn model_loss(
    model: &GptModel,
    tokens: &Tokens,
    params: &[ParamRef],
) -> (f64, Vec<(ParamRef, Vec<f64>)>) {
    let mut g = Graph::new();
    let mut binder = Binder::new(model, Weights::Pruned, params);
    let logits = model.logits(&mut g, &mut binder, tokens).unwrap();
    let root = g
        .cross_entropy(logits, &next_token_targets(tokens))
        .unwrap();
    let value = g.value(root).data()[0];
    g.backward(root).unwrap();
    let grads = binder
        .leaves()
        .iter()
        .map(|&(r, id)| (r, g.grad(id).map(<[f64]>::to_vec).unwrap_or_default()))
        .collect();
    (value, grads)
}

fn check_model(norm_kind: NormKind, seed: u64) {
    let config = ModelConfig {
        n_blocks: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        vocab: 9,
        seq_len: 5,
        norm_kind,
        tie_lm_head: false,
    };
    let mut model = GptModel::init(config, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    // Larger weights than the init scale keep gradients well above the floor.
    for p in model.prunable_refs() {
        let t = model.param_mut(p, Weights::Dense);
        *t = random(&mut r, t.shape(), -0.6, 0.6);
    }
    model.reset_pruning();
    let mask = Tensor::new(&[8, 8], (0..64).map(|i| f64::from(i % 2 == 0)).collect()).unwrap();
    model
        .matrix_mut(1, MatrixKind::Value)
        .set_mask(mask)
        .unwrap();
    let tokens = Tokens::new(2, 5, (0..10).map(|i| (i * 5 + 2) % 9).collect()).unwrap();
    let mut params = vec![ParamRef::TokEmb, ParamRef::PosEmb, ParamRef::LmHead];
    params.extend(model.prunable_refs());
    params.extend(model.norm_refs());
    let (_, grads) = model_loss(&model, &tokens, &params);

    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (r_ref, grad) = &grads[r.gen_range(0..grads.len())];
        let k = r.gen_range(0..grad.len());
        let mut plus = model.clone();
        plus.param_mut(*r_ref, Weights::Pruned).data_mut()[k] += H;
        plus.enforce_masks();
        let mut minus = model.clone();
        minus.param_mut(*r_ref, Weights::Pruned).data_mut()[k] -= H;
        minus.enforce_masks();
        let fd =
            (model_loss(&plus, &tokens, &[]).0 - model_loss(&minus, &tokens, &[]).0) / (2.0 * H);
        worst = worst.max(rel_err(grad[k], fd));
    }
    assert!(worst <= TOL, "{norm_kind:?}: relative error {worst:e}");
}

#[test]
fn two_block_model_matches_finite_differences() {
    check_model(NormKind::LayerNorm, 5);
    check_model(NormKind::RmsNorm, 6);
}
