//! Acceptance suite: prints one `criterion N: PASS|FAIL` line per criterion
//! and exits nonzero if an asserted criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recon_core::autograd::{Graph, NodeId};
use recon_core::criteria::{
    layer_objective, score_magnitude, score_wanda, select_mask, sparsegpt_prune_update, Criterion,
    SparseGptConfig, SparsityPattern,
};
use recon_core::data::{sample_calibration, Corpus};
use recon_core::metrics::{estimate_peak_memory, next_token_targets, recovery};
use recon_core::model::{
    split, Binder, GptModel, Granularity, ModelConfig, NormKind, ParamRef, Tokens, Weights,
};
use recon_core::optim::OptimConfig;
use recon_core::prune::prune_model;
use recon_core::recon::{
    analytic_matrix_recon, build_unit_batch, reconstruct_unit, retrain_full, ActivationStreams,
    PropagationStrategy, ReconLoss,
};
use recon_core::Tensor;
use recon_lab::commands::{default_dense_checkpoint, sweep_cmd, train_dense_cmd};
use recon_lab::config::ExperimentConfig;
use recon_lab::corpus::synthetic_corpus;
use recon_lab::report::{granularity_ranking, read_runs};
use recon_lab::sweep::SweepOptions;

/// Criteria reported but not asserted: the property does not hold for the
/// algorithm in general, so the line shows the measured outcome only.
const REPORT_ONLY: &[usize] = &[9];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Box-Muller standard normal draw.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = 1.0 - rng.gen::<f64>();
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * normal(rng)).collect()).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------- criterion 1

const H: f64 = 1e-5;

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-4)
}

/// Worst relative error of the op's input gradients against central
/// differences of a random projection of its output.
fn op_error(inputs: Vec<Tensor>, op: impl Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let eval = |inputs: &[Tensor], proj: &Tensor, track: bool| -> (f64, Vec<Vec<f64>>) {
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
        let root = if g.value(out).is_scalar() {
            out
        } else {
            let p = g.constant(proj.clone());
            let m = g.mul(out, p).unwrap();
            g.sum(m)
        };
        let v = g.value(root).data()[0];
        if !track {
            return (v, Vec::new());
        }
        g.backward(root).unwrap();
        (
            v,
            ids.iter()
                .map(|&i| g.grad(i).map(<[f64]>::to_vec).unwrap_or_default())
                .collect(),
        )
    };
    let shape = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &ids);
        g.value(out).shape().to_vec()
    };
    let proj = uniform(&mut ChaCha8Rng::seed_from_u64(11), &shape, -1.0, 1.0);
    let (_, grads) = eval(&inputs, &proj, true);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= H;
            let fd = (eval(&plus, &proj, false).0 - eval(&minus, &proj, false).0) / (2.0 * H);
            worst = worst.max(rel_err(grads[i].get(k).copied().unwrap_or(0.0), fd));
        }
    }
    worst
}

fn model_error(norm_kind: NormKind, seed: u64) -> f64 {
    let config = ModelConfig {
        n_blocks: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab: 11,
        seq_len: 6,
        norm_kind,
        tie_lm_head: false,
    };
    let mut model = GptModel::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.prunable_refs() {
        let t = model.param_mut(p, Weights::Dense);
        *t = uniform(&mut rng, t.shape(), -0.6, 0.6);
    }
    model.reset_pruning();
    let tokens = Tokens::new(2, 6, (0..12).map(|i| (i * 7 + 3) % 11).collect()).unwrap();
    let mut params = vec![ParamRef::TokEmb, ParamRef::PosEmb, ParamRef::LmHead];
    params.extend(model.prunable_refs());
    params.extend(model.norm_refs());
    let loss = |m: &GptModel, trainable: &[ParamRef]| {
        let mut g = Graph::new();
        let mut binder = Binder::new(m, Weights::Pruned, trainable);
        let logits = m.logits(&mut g, &mut binder, &tokens).unwrap();
        let root = g
            .cross_entropy(logits, &next_token_targets(&tokens))
            .unwrap();
        let v = g.value(root).data()[0];
        if trainable.is_empty() {
            return (v, Vec::new());
        }
        g.backward(root).unwrap();
        let grads: Vec<(ParamRef, Vec<f64>)> = binder
            .leaves()
            .iter()
            .map(|&(r, id)| (r, g.grad(id).map(<[f64]>::to_vec).unwrap_or_default()))
            .collect();
        (v, grads)
    };
    let (_, grads) = loss(&model, &params);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (r, grad) = &grads[rng.gen_range(0..grads.len())];
        let k = rng.gen_range(0..grad.len());
        let mut plus = model.clone();
        plus.param_mut(*r, Weights::Pruned).data_mut()[k] += H;
        let mut minus = model.clone();
        minus.param_mut(*r, Weights::Pruned).data_mut()[k] -= H;
        let fd = (loss(&plus, &[]).0 - loss(&minus, &[]).0) / (2.0 * H);
        worst = worst.max(rel_err(grad[k], fd));
    }
    worst
}

fn criterion_1() -> Verdict {
    let t0 = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[4, 2], -1.0, 1.0);
    let c = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let w = uniform(&mut r, &[5, 4], -1.0, 1.0);
    let gain = uniform(&mut r, &[4], 0.5, 1.5);
    let bias = uniform(&mut r, &[4], -0.5, 0.5);
    let mask = Tensor::new(&[3, 4], (0..12).map(|i| f64::from(i % 3 != 1)).collect()).unwrap();
    let mut errors: Vec<(&str, f64)> = vec![
        (
            "matmul",
            op_error(vec![a.clone(), b.clone()], |g, x| {
                g.matmul(x[0], x[1]).unwrap()
            }),
        ),
        (
            "add",
            op_error(vec![a.clone(), c.clone()], |g, x| {
                g.add(x[0], x[1]).unwrap()
            }),
        ),
        (
            "mul",
            op_error(vec![a.clone(), c.clone()], |g, x| {
                g.mul(x[0], x[1]).unwrap()
            }),
        ),
        (
            "transpose",
            op_error(vec![a.clone()], |g, x| g.transpose(x[0]).unwrap()),
        ),
        ("softmax", op_error(vec![a.clone()], |g, x| g.softmax(x[0]))),
        (
            "layernorm",
            op_error(vec![a.clone(), gain.clone(), bias.clone()], |g, x| {
                g.layernorm(x[0], x[1], x[2]).unwrap()
            }),
        ),
        (
            "rmsnorm",
            op_error(vec![a.clone(), gain.clone()], |g, x| {
                g.rmsnorm(x[0], x[1]).unwrap()
            }),
        ),
        ("gelu", op_error(vec![a.clone()], |g, x| g.gelu(x[0]))),
        ("silu", op_error(vec![a.clone()], |g, x| g.silu(x[0]))),
        (
            "embed",
            op_error(vec![w.clone()], |g, x| {
                g.embed(x[0], &[4, 0, 4, 2]).unwrap()
            }),
        ),
        (
            "reshape",
            op_error(vec![a.clone()], |g, x| g.reshape(x[0], &[2, 6]).unwrap()),
        ),
        (
            "slice",
            op_error(vec![a.clone()], |g, x| g.slice(x[0], 1, 1, 2, 3).unwrap()),
        ),
        (
            "mask-mul",
            op_error(vec![a.clone()], move |g, x| {
                let m = g.constant(mask.clone());
                g.mask_mul(x[0], m).unwrap()
            }),
        ),
        (
            "linear",
            op_error(vec![a.clone(), w.clone()], |g, x| {
                g.linear(x[0], x[1]).unwrap()
            }),
        ),
        (
            "mse",
            op_error(vec![a.clone(), c.clone()], |g, x| {
                g.mse(x[0], x[1]).unwrap()
            }),
        ),
        (
            "cosine",
            op_error(vec![a.clone(), c.clone()], |g, x| {
                g.cosine_loss(x[0], x[1]).unwrap()
            }),
        ),
        (
            "cross-entropy",
            op_error(vec![a.clone()], |g, x| {
                g.cross_entropy(x[0], &[Some(1), None, Some(3)]).unwrap()
            }),
        ),
    ];
    errors.push(("model-layernorm", model_error(NormKind::LayerNorm, 5)));
    errors.push(("model-rmsnorm", model_error(NormKind::RmsNorm, 6)));
    let (name, worst) = errors
        .iter()
        .copied()
        .fold(("", 0.0), |acc, e| if e.1 > acc.1 { e } else { acc });
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-5 && secs < 60.0,
        format!(
            "{} checks, worst relative error {worst:.2e} ({name}), {secs:.1} s",
            errors.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

/// Conjugate gradient on the least-squares objective of each row restricted
/// to its support, iterated to convergence.
fn cgls_objective(w: &Tensor, mask: &Tensor, x: &Tensor) -> f64 {
    let (rows, d_in, b) = (w.rows(), w.cols(), x.cols());
    let mut w_hat = Tensor::zeros(&[rows, d_in]);
    for i in 0..rows {
        let support: Vec<usize> = (0..d_in).filter(|&j| mask.at(i, j) == 1.0).collect();
        let target: Vec<f64> = (0..b)
            .map(|t| (0..d_in).map(|j| w.at(i, j) * x.at(j, t)).sum())
            .collect();
        let apply = |v: &[f64]| -> Vec<f64> {
            (0..b)
                .map(|t| support.iter().zip(v).map(|(&j, vj)| vj * x.at(j, t)).sum())
                .collect()
        };
        let apply_t = |r: &[f64]| -> Vec<f64> {
            support
                .iter()
                .map(|&j| (0..b).map(|t| x.at(j, t) * r[t]).sum())
                .collect()
        };
        let mut v = vec![0.0; support.len()];
        let mut r = target.clone();
        let mut s = apply_t(&r);
        let mut p = s.clone();
        let mut gamma: f64 = s.iter().map(|z| z * z).sum();
        let stop = gamma * 1e-28;
        for _ in 0..10 * support.len().max(1) {
            if gamma <= stop {
                break;
            }
            let q = apply(&p);
            let alpha = gamma / q.iter().map(|z| z * z).sum::<f64>();
            for (vk, pk) in v.iter_mut().zip(&p) {
                *vk += alpha * pk;
            }
            for (rk, qk) in r.iter_mut().zip(&q) {
                *rk -= alpha * qk;
            }
            s = apply_t(&r);
            let next: f64 = s.iter().map(|z| z * z).sum();
            for (pk, sk) in p.iter_mut().zip(&s) {
                *pk = sk + next / gamma * *pk;
            }
            gamma = next;
        }
        for (&j, vj) in support.iter().zip(&v) {
            w_hat.set(i, j, *vj);
        }
    }
    layer_objective(w, &w_hat, x)
}

fn criterion_2() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_gap, mut worst_rel, mut beaten) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..50 {
        let rows = rng.gen_range(1..=8);
        let d_in = rng.gen_range(2..=8);
        let w = gaussian(&mut rng, &[rows, d_in], 1.0);
        let x = gaussian(&mut rng, &[d_in, 32], 1.0);
        let mask = Tensor::new(
            &[rows, d_in],
            (0..rows * d_in)
                .map(|_| f64::from(rng.gen_bool(0.5)))
                .collect(),
        )
        .unwrap();
        let w_hat = analytic_matrix_recon(&w, &mask, &x, 0.0).unwrap();
        let obj = layer_objective(&w, &w_hat, &x);
        let scale = layer_objective(&w, &Tensor::zeros(&[rows, d_in]), &x);
        for k in 0..1000 {
            let step = 10f64.powi(-(k % 7));
            let mut p = w_hat.clone();
            for (v, m) in p.data_mut().iter_mut().zip(mask.data()) {
                *v += m * step * normal(&mut rng);
            }
            let po = layer_objective(&w, &p, &x);
            if po < obj {
                worst_gap = worst_gap.max((obj - po) / scale);
                if obj - po > 1e-12 * scale {
                    beaten += 1;
                }
            }
        }
        let it = cgls_objective(&w, &mask, &x);
        worst_rel = worst_rel.max((obj - it).abs() / it.max(1e-12 * scale));
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        beaten == 0 && worst_rel <= 1e-6 && secs < 60.0,
        format!(
            "50 instances: {beaten} of 50000 perturbations lower (worst round-off gap {worst_gap:.1e} of scale), \
             worst relative gap to CG {worst_rel:.1e}, {secs:.1} s"
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn toy_config() -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab: 258,
        seq_len: 16,
        norm_kind: NormKind::LayerNorm,
        tie_lm_head: false,
    }
}

fn toy_model_and_tokens(seed: u64) -> (GptModel, Tokens) {
    let corpus = Corpus::new(synthetic_corpus(20_000, seed), 0.1).unwrap();
    let mut model = GptModel::init(toy_config(), seed).unwrap();
    let cfg = recon_core::train::TrainConfig {
        steps: 40,
        batch_size: 4,
        seed,
        ..Default::default()
    };
    recon_core::train::train_dense(&mut model, &corpus.train_tokens(), None, &cfg).unwrap();
    let calib = sample_calibration(&corpus, 6, 16, seed).unwrap();
    (model, calib.tokens)
}

fn mask_counts_ok(mask: &Tensor, pattern: SparsityPattern) -> bool {
    let (rows, cols) = (mask.rows(), mask.cols());
    (0..rows).all(|i| {
        let row: Vec<f64> = (0..cols).map(|j| mask.at(i, j)).collect();
        match pattern {
            SparsityPattern::SemiStructured { n, m } => {
                row.chunks(m).all(|g| g.iter().sum::<f64>() == n as f64)
            }
            SparsityPattern::Unstructured(r) => {
                row.iter().sum::<f64>() as usize == recon_core::criteria::keep_count(r, cols)
            }
        }
    })
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let patterns = [
        SparsityPattern::SemiStructured { n: 2, m: 4 },
        SparsityPattern::SemiStructured { n: 1, m: 4 },
        SparsityPattern::SemiStructured { n: 4, m: 8 },
        SparsityPattern::Unstructured(0.5),
        SparsityPattern::Unstructured(0.3),
        SparsityPattern::Unstructured(0.9),
    ];
    let mut bad_masks = 0;
    let mut masks = 0;
    for _ in 0..50 {
        let shape = [rng.gen_range(1..10), 8 * rng.gen_range(1..4)];
        let w = gaussian(&mut rng, &shape, 1.0);
        let x = gaussian(&mut rng, &[w.cols(), 24], 1.0);
        for p in patterns {
            for mask in [
                select_mask(&score_magnitude(&w), p).unwrap(),
                select_mask(&score_wanda(&w, &x).unwrap(), p).unwrap(),
                sparsegpt_prune_update(&w, &x, p, &SparseGptConfig::default())
                    .unwrap()
                    .0,
            ] {
                masks += 1;
                bad_masks += usize::from(!mask_counts_ok(&mask, p));
            }
        }
    }

    // End to end: every weight of every matrix checked after pruning, after
    // every reconstruction unit and after retraining.
    let (dense, tokens) = toy_model_and_tokens(3);
    let mut checks = 0usize;
    let mut violations = 0usize;
    let mut check = |m: &GptModel| {
        checks += 1;
        violations += m.mask_violations();
    };
    let opt = OptimConfig {
        lr: 1e-3,
        epochs: 2,
        ..OptimConfig::default()
    };
    for criterion in [Criterion::Magnitude, Criterion::Wanda, Criterion::SparseGpt] {
        for pattern in [
            SparsityPattern::SemiStructured { n: 2, m: 4 },
            SparsityPattern::Unstructured(0.5),
        ] {
            let mut model = dense.clone();
            prune_model(
                &mut model,
                &tokens,
                criterion,
                pattern,
                &SparseGptConfig::default(),
            )
            .unwrap();
            check(&model);
            for mat in model.blocks.iter().flat_map(|b| b.matrices.iter()) {
                masks += 1;
                bad_masks += usize::from(!mask_counts_ok(&mat.mask, pattern));
            }
            let pruned = model.clone();
            for g in [
                Granularity::PerMatrix,
                Granularity::HalfBlock,
                Granularity::Blocks(2),
            ] {
                for (loss, strategy) in [
                    (ReconLoss::Mse, PropagationStrategy::Mixed),
                    (ReconLoss::Cosine, PropagationStrategy::Sparse),
                ] {
                    let mut model = pruned.clone();
                    let units = split(&model.config, g, false).unwrap();
                    let mut streams = ActivationStreams::new(&model, &tokens).unwrap();
                    for unit in &units {
                        streams.prepare(&model, unit).unwrap();
                        let batch = build_unit_batch(&streams, &model, unit, strategy).unwrap();
                        reconstruct_unit(&mut model, unit, &batch, loss, &opt).unwrap();
                        check(&model);
                        streams.advance(&model, unit).unwrap();
                    }
                }
            }
            let mut model = pruned.clone();
            retrain_full(&mut model, &tokens, &opt).unwrap();
            check(&model);
        }
    }
    verdict(
        bad_masks == 0 && violations == 0,
        format!("{masks} masks with {bad_masks} count errors; {checks} full-model mask checks with {violations} violations"),
    )
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut equal = 0;
    let mut total = 0;
    for _ in 0..100 {
        let rows = rng.gen_range(1..12);
        let d_in = 4 * rng.gen_range(1..5);
        let w = gaussian(&mut rng, &[rows, d_in], 1.0);
        let mut x = gaussian(&mut rng, &[d_in, 20], 1.0);
        for j in 0..d_in {
            let n = (0..20).map(|t| x.at(j, t).powi(2)).sum::<f64>().sqrt();
            for t in 0..20 {
                x.set(j, t, x.at(j, t) / n);
            }
        }
        for p in [
            SparsityPattern::Unstructured(0.5),
            SparsityPattern::SemiStructured { n: 2, m: 4 },
        ] {
            total += 1;
            let mag = select_mask(&score_magnitude(&w), p).unwrap();
            let wanda = select_mask(&score_wanda(&w, &x).unwrap(), p).unwrap();
            equal += usize::from(mag == wanda);
        }
    }
    verdict(
        equal == total,
        format!("{equal}/{total} Wanda masks equal magnitude masks"),
    )
}

// ---------------------------------------------------------------- criterion 5

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn criterion_5() -> Verdict {
    let (dense, tokens) = toy_model_and_tokens(5);
    let grans = [
        Granularity::PerMatrix,
        Granularity::HalfBlock,
        Granularity::Blocks(1),
        Granularity::Blocks(2),
        Granularity::FullDecoder,
    ];
    let mut first_ok = 0;
    let mut all_ok = 0;
    let mut units_total = 0;
    let mut pruned = dense.clone();
    prune_model(
        &mut pruned,
        &tokens,
        Criterion::Wanda,
        SparsityPattern::Unstructured(0.5),
        &SparseGptConfig::default(),
    )
    .unwrap();
    let mut unpruned = dense.clone();
    unpruned.reset_pruning();
    for g in grans {
        for (model, every) in [(&pruned, false), (&unpruned, true)] {
            let units = split(&model.config, g, false).unwrap();
            let mut streams = ActivationStreams::new(model, &tokens).unwrap();
            let upto = if every { units.len() } else { 1 };
            let mut ok = true;
            for unit in &units[..upto] {
                streams.prepare(model, unit).unwrap();
                let b: Vec<_> = PropagationStrategy::ALL
                    .iter()
                    .map(|&s| build_unit_batch(&streams, model, unit, s).unwrap())
                    .collect();
                ok &= b.windows(2).all(|p| {
                    bits(&p[0].inputs) == bits(&p[1].inputs)
                        && bits(&p[0].targets) == bits(&p[1].targets)
                });
                streams.advance(model, unit).unwrap();
                if every {
                    units_total += 1;
                }
            }
            if every {
                all_ok += usize::from(ok);
            } else {
                first_ok += usize::from(ok);
            }
        }
    }
    verdict(
        first_ok == grans.len() && all_ok == grans.len(),
        format!(
            "first unit bit-identical for {first_ok}/{} splits; all-ones masks bit-identical at all {units_total} units for {all_ok}/{} splits",
            grans.len(),
            grans.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Verdict {
    let r = recovery(14.62, 18.31, 15.49).unwrap();
    let anchors =
        recovery(14.62, 18.31, 14.62) == Some(1.0) && recovery(14.62, 18.31, 18.31) == Some(0.0);
    verdict(
        (r - 0.7642).abs() <= 1e-4 && anchors,
        format!(
            "recovery(14.62, 18.31, 15.49) = {r:.6}; anchors 1 at dense and 0 at pruned: {anchors}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Verdict {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, synthetic_corpus(1 << 20, 0)).unwrap();
    let out = dir.path().join("out");
    let cfg = ExperimentConfig::from_toml(&format!(
        r#"
        corpus = "{}"
        out_dir = "{}"
        [model]
        n_blocks = 4
        d_model = 128
        n_heads = 4
        d_ff = 256
        seq_len = 64
        [train]
        steps = 300
        batch_size = 8
        eval_every = 0
        [calibration]
        n_samples = 16
        seeds = [0, 1]
        [prune]
        criterion = "wanda"
        pattern = "50%"
        [reconstruct]
        granularities = ["per-matrix", "half-block", "blocks-1", "blocks-2", "full-decoder"]
        strategies = ["mp"]
        losses = ["mse"]
        lrs = [1e-5, 3e-5, 1e-4]
        epochs = [20]
        [eval]
        max_holdout_tokens = 16384
        "#,
        corpus.display(),
        out.display()
    ))
    .unwrap();
    let ckpt = default_dense_checkpoint(&out);
    let trained = train_dense_cmd(&cfg, &ckpt).unwrap();
    let sweep = sweep_cmd(&cfg, &ckpt, SweepOptions::default()).unwrap();
    let records = read_runs(&out).unwrap();
    let ranking = granularity_ranking(&records);
    let violations: usize = records.iter().map(|r| r.mask_violations).sum();
    let all_positive =
        ranking.len() == 5 && ranking.iter().all(|(_, v)| v.is_some_and(|v| v > 0.0));
    let half_top2 = ranking.iter().take(2).any(|(g, _)| g == "half-block");
    let secs = t0.elapsed().as_secs_f64();
    let listing: Vec<String> = ranking
        .iter()
        .map(|(g, v)| format!("{g} {}", v.map_or("n/a".into(), |v| format!("{v:.4}"))))
        .collect();
    verdict(
        all_positive && violations == 0 && sweep.executed == 30 && trained.holdout_ppl < trained.unigram_ppl && secs <= 3600.0,
        format!(
            "dense ppl {:.3} vs unigram {:.3}; {} runs; ranking by best mean recovery: {}; half-block in top 2: {half_top2}; {secs:.0} s",
            trained.holdout_ppl,
            trained.unigram_ppl,
            records.len(),
            listing.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Verdict {
    let toy = ModelConfig {
        n_blocks: 4,
        d_model: 128,
        n_heads: 4,
        d_ff: 256,
        vocab: 258,
        seq_len: 64,
        norm_kind: NormKind::LayerNorm,
        tie_lm_head: false,
    };
    let opt = ModelConfig {
        n_blocks: 24,
        d_model: 2048,
        n_heads: 32,
        d_ff: 8192,
        vocab: 50272,
        seq_len: 2048,
        norm_kind: NormKind::LayerNorm,
        tie_lm_head: true,
    };
    let chain = |c: &ModelConfig| -> Vec<u64> {
        let mut g = vec![Granularity::PerMatrix, Granularity::HalfBlock];
        g.extend((1..=c.n_blocks).map(Granularity::Blocks));
        g.push(Granularity::FullDecoder);
        g.iter()
            .map(|&g| estimate_peak_memory(c, g).unwrap().peak_bytes as u64)
            .collect()
    };
    let (a, b) = (chain(&toy), chain(&opt));
    let mono = |v: &[u64]| v.windows(2).all(|w| w[0] <= w[1]);
    let ratio = *b.last().unwrap() as f64 / b[1] as f64;
    verdict(
        mono(&a) && mono(&b) && ratio > 5.0,
        format!(
            "nondecreasing over {} and {} granularities; 24-block d2048 full-decoder/half-block = {ratio:.1}x",
            a.len(),
            b.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = SparseGptConfig::default();
    let p = SparsityPattern::Unstructured(0.5);
    let mut violations = 0;
    let mut worst = 0.0f64;
    let (mut sum_sg, mut sum_mag) = (0.0, 0.0);
    for _ in 0..100 {
        let w = gaussian(&mut rng, &[8, 8], 1.0);
        let x = gaussian(&mut rng, &[8, 32], 1.0);
        let (_, w_hat) = sparsegpt_prune_update(&w, &x, p, &cfg).unwrap();
        let mag = select_mask(&score_magnitude(&w), p).unwrap();
        let sg = layer_objective(&w, &w_hat, &x);
        let mo = layer_objective(&w, &w.hadamard(&mag).unwrap(), &x);
        sum_sg += sg;
        sum_mag += mo;
        if sg > mo {
            violations += 1;
            worst = worst.max(sg / mo - 1.0);
        }
    }
    let mut identity_equal = 0;
    for _ in 0..20 {
        let w = gaussian(&mut rng, &[6, 8], 1.0);
        let x = Tensor::identity(8);
        for p in [
            SparsityPattern::Unstructured(0.5),
            SparsityPattern::SemiStructured { n: 2, m: 4 },
        ] {
            let (_, w_hat) = sparsegpt_prune_update(&w, &x, p, &cfg).unwrap();
            let mag = w
                .hadamard(&select_mask(&score_magnitude(&w), p).unwrap())
                .unwrap();
            identity_equal +=
                usize::from(layer_objective(&w, &w_hat, &x) == layer_objective(&w, &mag, &x));
        }
    }
    verdict(
        violations == 0 && identity_equal == 40,
        format!(
            "iid Gaussian 8x8, B=32: SparseGPT objective <= magnitude on {}/100 (worst excess {:.1}%), \
             total {sum_sg:.1} vs {sum_mag:.1}; exact equality with X = I on {identity_equal}/40",
            100 - violations,
            100.0 * worst
        ),
    )
}

// ---------------------------------------------------------------- criterion 10

fn criterion_10() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, synthetic_corpus(60_000, 10)).unwrap();
    let cfg_for = |out: &std::path::Path| {
        ExperimentConfig::from_toml(&format!(
            r#"
            corpus = "{}"
            out_dir = "{}"
            [model]
            n_blocks = 2
            d_model = 16
            n_heads = 2
            d_ff = 32
            seq_len = 16
            [train]
            steps = 30
            batch_size = 4
            [calibration]
            n_samples = 4
            seeds = [0, 1]
            [reconstruct]
            granularities = ["per-matrix", "half-block"]
            strategies = ["mp", "sp"]
            lrs = [1e-3]
            epochs = [2]
            retrain = true
            [eval]
            max_holdout_tokens = 1024
            "#,
            corpus.display(),
            out.display()
        ))
        .unwrap()
    };
    let snapshot = |out: &std::path::Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(out.join("runs"))
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .collect();
        files.push((
            "summary.md".into(),
            std::fs::read(out.join("summary.md")).unwrap(),
        ));
        files.sort();
        files
    };
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    let mut outcomes = Vec::new();
    for out in [&a, &b, &c] {
        let cfg = cfg_for(out);
        train_dense_cmd(&cfg, &default_dense_checkpoint(out)).unwrap();
    }
    let ckpt_identical = std::fs::read(default_dense_checkpoint(&a)).unwrap()
        == std::fs::read(default_dense_checkpoint(&b)).unwrap();
    for out in [&a, &b] {
        let cfg = cfg_for(out);
        outcomes.push(
            sweep_cmd(
                &cfg,
                &default_dense_checkpoint(out),
                SweepOptions::default(),
            )
            .unwrap(),
        );
    }
    let total = outcomes[0].executed;
    let reproducible = snapshot(&a) == snapshot(&b);

    let cfg_c = cfg_for(&c);
    let ck = default_dense_checkpoint(&c);
    let first = sweep_cmd(&cfg_c, &ck, SweepOptions { limit: Some(3) }).unwrap();
    let resumed = sweep_cmd(&cfg_c, &ck, SweepOptions::default()).unwrap();
    let again = sweep_cmd(&cfg_c, &ck, SweepOptions::default()).unwrap();
    let resume_ok = !first.complete
        && first.executed == 3
        && resumed.executed == total - 3
        && resumed.skipped == 3
        && again.executed == 0
        && snapshot(&c) == snapshot(&a);
    verdict(
        ckpt_identical && reproducible && resume_ok,
        format!(
            "dense checkpoints identical: {ckpt_identical}; two fresh sweeps of {total} cells byte-identical: {reproducible}; \
             interrupted after 3, resume ran {} and skipped {}, rerun ran {}, final report identical: {}",
            resumed.executed,
            resumed.skipped,
            again.executed,
            snapshot(&c) == snapshot(&a)
        ),
    )
}

fn main() {
    let criteria: [(usize, &str, fn() -> Verdict); 10] = [
        (1, "gradient correctness", criterion_1),
        (2, "analytic solver optimality", criterion_2),
        (3, "mask invariants", criterion_3),
        (4, "Wanda reduces to magnitude", criterion_4),
        (5, "propagation coincidence", criterion_5),
        (6, "recovery formula", criterion_6),
        (7, "desk-scale end to end", criterion_7),
        (8, "memory monotonicity", criterion_8),
        (9, "SparseGPT versus magnitude", criterion_9),
        (10, "determinism and resume", criterion_10),
    ];
    let filter: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (n, name, run) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let v = run();
        let status = if v.pass { "PASS" } else { "FAIL" };
        let note = if !v.pass && REPORT_ONLY.contains(&n) {
            " [reported, not asserted]"
        } else {
            ""
        };
        println!("criterion {n}: {status} {name}: {}{note}", v.detail);
        if !v.pass && !REPORT_ONLY.contains(&n) {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
