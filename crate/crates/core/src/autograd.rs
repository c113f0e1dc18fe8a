//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its output [`Tensor`].
//! Nodes are appended in evaluation order, so the node list is a topological
//! order by construction and [`Graph::backward`] is a single reverse sweep.
//!
//! Leaves come in two flavours: [`Graph::param`] (gradient is accumulated into the
//! leaf's grad slot) and [`Graph::constant`] (never differentiated). Gradients of
//! leaves persist across `backward` calls until [`Graph::zero_grad`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::math;
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const RMSNORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Linear(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RmsNorm {
        x: NodeId,
        gamma: NodeId,
        inv_rms: Vec<f64>,
    },
    Gelu(NodeId),
    Silu(NodeId),
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    Reshape(NodeId),
    Slice {
        src: NodeId,
        row: usize,
        col: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    MaskMul {
        w: NodeId,
        mask: NodeId,
    },
    Sum(NodeId),
    Mse(NodeId, NodeId),
    Cosine {
        pred: NodeId,
        target: NodeId,
        degenerate: Vec<bool>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
}

/// Computation graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn take_value(&mut self, id: NodeId) -> Tensor {
        core::mem::replace(&mut self.nodes[id.0].value, Tensor::scalar(0.0))
    }

    /// Gradient accumulated into a parameter leaf.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Ids of every leaf that has received a gradient.
    pub fn leaves_with_grad(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.value.grad().is_some())
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, value, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tracked)
    }

    pub fn param(&mut self, mut value: Tensor) -> NodeId {
        value.set_requires_grad(true);
        value.zero_grad();
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, mut value: Tensor) -> NodeId {
        value.set_requires_grad(false);
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, t))
    }

    /// `x · wᵀ` with `x: n x in`, `w: out x in`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.cols() || wv.shape().len() != 2 {
            return Err(mismatch("linear", xv, wv));
        }
        let (n, k, m) = (xv.rows(), xv.cols(), wv.rows());
        let out = kernels::gemm_nt(xv.data(), wv.data(), n, k, m);
        let t = self.tracked(&[x, w]);
        Ok(self.push(Op::Linear(x, w), Tensor::from_parts(vec![n, m], out), t))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, t))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Sub(a, b), out, t))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Mul(a, b), out, t))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(mismatch("add_bias", xv, bv));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % c])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let t = self.tracked(&[x, bias]);
        Ok(self.push(Op::AddBias(x, bias), out, t))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|x| x * s);
        let t = self.tracked(&[a]);
        self.push(Op::Scale(a, s), out, t)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(shape_err(
                "transpose",
                format!("expected 2-D, got {:?}", av.shape()),
            ));
        }
        let out = av.transpose();
        let t = self.tracked(&[a]);
        Ok(self.push(Op::Transpose(a), out, t))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let t = self.tracked(&[a]);
        self.push(Op::Softmax(a), out, t)
    }

    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(mismatch("layernorm", xv, gv));
        }
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / math::sqrt(var + LAYERNORM_EPS);
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let t = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
            t,
        ))
    }

    pub fn rmsnorm(&mut self, x: NodeId, gamma: NodeId) -> Result<NodeId> {
        let (xv, gv) = (self.value(x), self.value(gamma));
        let c = xv.cols();
        if gv.len() != c {
            return Err(mismatch("rmsnorm", xv, gv));
        }
        let mut inv_rms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let ir = 1.0 / math::sqrt(ms + RMSNORM_EPS);
            inv_rms.push(ir);
            out.extend(row.iter().zip(gv.data()).map(|(v, g)| v * ir * g));
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let t = self.tracked(&[x, gamma]);
        Ok(self.push(Op::RmsNorm { x, gamma, inv_rms }, out, t))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(gelu);
        let t = self.tracked(&[a]);
        self.push(Op::Gelu(a), out, t)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let t = self.tracked(&[a]);
        self.push(Op::Silu(a), out, t)
    }

    /// Gathers rows of `table` (shape `vocab x d`).
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        let t = self.tracked(&[table]);
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            out,
            t,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).reshaped(shape).map_err(|_| {
            shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.value(a).shape(), shape),
            )
        })?;
        let t = self.tracked(&[a]);
        Ok(self.push(Op::Reshape(a), out, t))
    }

    /// Copies the `rows x cols` block starting at `(row, col)` of a matrix.
    pub fn slice(
        &mut self,
        src: NodeId,
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let sv = self.value(src);
        let c = sv.cols();
        if row + rows > sv.rows() || col + cols > c || rows == 0 || cols == 0 {
            return Err(shape_err(
                "slice",
                format!(
                    "block {rows}x{cols} at ({row},{col}) outside {:?}",
                    sv.shape()
                ),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in row..row + rows {
            data.extend_from_slice(&sv.data()[r * c + col..r * c + col + cols]);
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        let t = self.tracked(&[src]);
        Ok(self.push(Op::Slice { src, row, col }, out, t))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        if parts.is_empty() || parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape_err(
                "concat_cols",
                format!("{} parts with differing rows", parts.len()),
            ));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        let t = self.tracked(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, t))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        if refs.is_empty() {
            return Err(shape_err("concat_rows", "no parts".into()));
        }
        let out = Tensor::concat_rows(&refs)?;
        let t = self.tracked(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, t))
    }

    /// `w ⊙ mask`. Entries where the mask is zero are exactly zero, and so are
    /// their gradients.
    pub fn mask_mul(&mut self, w: NodeId, mask: NodeId) -> Result<NodeId> {
        let out = self.zip_same(
            "mask_mul",
            w,
            mask,
            |x, m| if m == 0.0 { 0.0 } else { x * m },
        )?;
        let t = self.tracked(&[w, mask]);
        Ok(self.push(Op::MaskMul { w, mask }, out, t))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let t = self.tracked(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), t)
    }

    /// Mean over all elements of `(pred - target)²`.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, q) = (self.value(pred), self.value(target));
        if p.shape() != q.shape() {
            return Err(mismatch("mse", p, q));
        }
        let v = mse_value(p.data(), q.data());
        let t = self.tracked(&[pred, target]);
        Ok(self.push(Op::Mse(pred, target), Tensor::scalar(v), t))
    }

    /// `1 - mean_t cos(pred_t, target_t)` over rows. Rows where either vector has
    /// zero norm count as orthogonal (contribute 1) and receive no gradient.
    pub fn cosine_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, q) = (self.value(pred), self.value(target));
        if p.shape() != q.shape() {
            return Err(mismatch("cosine_loss", p, q));
        }
        let (v, degenerate) = cosine_value(p.data(), q.data(), p.cols());
        let t = self.tracked(&[pred, target]);
        Ok(self.push(
            Op::Cosine {
                pred,
                target,
                degenerate,
            },
            Tensor::scalar(v),
            t,
        ))
    }

    /// Number of rows treated as orthogonal by a cosine-loss node.
    pub fn degenerate_rows(&self, id: NodeId) -> usize {
        match &self.nodes[id.0].op {
            Op::Cosine { degenerate, .. } => degenerate.iter().filter(|&&d| d).count(),
            _ => 0,
        }
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let lv = self.value(logits);
        let c = lv.cols();
        if lv.rows() != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("{} rows vs {} targets", lv.rows(), targets.len()),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut nll = 0.0;
        let mut count = 0usize;
        for (row, (target, lrow)) in probs
            .chunks_mut(c)
            .zip(targets.iter().zip(lv.data().chunks(c)))
        {
            if let Some(t) = *target {
                if t >= c {
                    return Err(Error::TokenOutOfRange { id: t, vocab: c });
                }
                nll -= log_softmax_at(lrow, t);
                count += 1;
            }
            softmax_in_place(row);
        }
        let v = if count == 0 { 0.0 } else { nll / count as f64 };
        let t = self.tracked(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(v),
            t,
        ))
    }

    /// Reverse sweep from a scalar root. Parameter leaves accumulate their
    /// gradients; intermediate gradients are dropped once consumed.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (input, delta) in self.local_grads(i, &g) {
                if !self.nodes[input.0].tracked {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs, given its output
    /// gradient `g`. Inputs that do not need a gradient may be skipped.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let node = &self.nodes[i];
        let need = |id: NodeId| self.nodes[id.0].tracked;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if need(*a) {
                    out.push((*a, kernels::gemm_nt(g, bv.data(), m, n, k)));
                }
                if need(*b) {
                    out.push((*b, kernels::gemm_tn(av.data(), g, m, k, n)));
                }
            }
            Op::Linear(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k, m) = (xv.rows(), xv.cols(), wv.rows());
                if need(*x) {
                    out.push((*x, kernels::gemm_nn(g, wv.data(), n, m, k)));
                }
                if need(*w) {
                    out.push((*w, kernels::gemm_tn(g, xv.data(), n, m, k)));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                out.push((*a, g.iter().zip(bv.data()).map(|(g, b)| g * b).collect()));
                out.push((*b, g.iter().zip(av.data()).map(|(g, a)| g * a).collect()));
            }
            Op::AddBias(x, b) => {
                out.push((*x, g.to_vec()));
                if need(*b) {
                    out.push((*b, column_sums(g, self.value(*b).len())));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|v| v * s).collect())),
            Op::Transpose(a) => {
                let v = &node.value;
                out.push((*a, kernels::transpose(g, v.rows(), v.cols())));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                out.push((*a, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let c = gv.len();
                if need(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, hr), is) in g.chunks(c).zip(xhat.chunks(c)).zip(inv_std) {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(g, w)| g * w).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(d, h)| d * h).sum();
                        let n = c as f64;
                        dx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(d, h)| is / n * (n * d - s1 - h * s2)),
                        );
                    }
                    out.push((*x, dx));
                }
                if need(*gamma) {
                    let prod: Vec<f64> = g.iter().zip(xhat).map(|(g, h)| g * h).collect();
                    out.push((*gamma, column_sums(&prod, c)));
                }
                if need(*beta) {
                    out.push((*beta, column_sums(g, c)));
                }
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let c = gv.len();
                if need(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, xr), ir) in g.chunks(c).zip(xv.chunks(c)).zip(inv_rms) {
                        let dn: Vec<f64> = gr.iter().zip(gv).map(|(g, w)| g * w).collect();
                        let s: f64 = dn.iter().zip(xr).map(|(d, x)| d * x).sum();
                        let k = ir * ir * ir * s / c as f64;
                        dx.extend(dn.iter().zip(xr).map(|(d, x)| ir * d - x * k));
                    }
                    out.push((*x, dx));
                }
                if need(*gamma) {
                    let mut prod = Vec::with_capacity(g.len());
                    for ((gr, xr), ir) in g.chunks(c).zip(xv.chunks(c)).zip(inv_rms) {
                        prod.extend(gr.iter().zip(xr).map(|(g, x)| g * x * ir));
                    }
                    out.push((*gamma, column_sums(&prod, c)));
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                out.push((
                    *a,
                    g.iter().zip(xv).map(|(g, &x)| g * gelu_grad(x)).collect(),
                ));
            }
            Op::Silu(a) => {
                let xv = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                out.push((*a, d));
            }
            Op::Embed { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                out.push((*table, dt));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Slice { src, row, col } => {
                let sv = self.value(*src);
                let c = sv.cols();
                let (rows, cols) = (node.value.rows(), node.value.cols());
                let mut ds = vec![0.0; sv.len()];
                for r in 0..rows {
                    let dst = (row + r) * c + col;
                    ds[dst..dst + cols].copy_from_slice(&g[r * cols..(r + 1) * cols]);
                }
                out.push((*src, ds));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if need(p) {
                        let mut dp = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + pc]);
                        }
                        out.push((p, dp));
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if need(p) {
                        out.push((p, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::MaskMul { w, mask } => {
                let (wv, mv) = (self.value(*w), self.value(*mask));
                out.push((
                    *w,
                    g.iter()
                        .zip(mv.data())
                        .map(|(g, &m)| if m == 0.0 { 0.0 } else { g * m })
                        .collect(),
                ));
                if need(*mask) {
                    out.push((*mask, g.iter().zip(wv.data()).map(|(g, w)| g * w).collect()));
                }
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::Mse(p, q) => {
                let (pv, qv) = (self.value(*p).data(), self.value(*q).data());
                let s = 2.0 * g[0] / pv.len() as f64;
                let dp: Vec<f64> = pv.iter().zip(qv).map(|(a, b)| s * (a - b)).collect();
                if need(*q) {
                    out.push((*q, dp.iter().map(|v| -v).collect()));
                }
                out.push((*p, dp));
            }
            Op::Cosine {
                pred,
                target,
                degenerate,
            } => {
                let (pv, qv) = (self.value(*pred), self.value(*target));
                let c = pv.cols();
                let rows = pv.rows() as f64;
                let mut dp = vec![0.0; pv.len()];
                let mut dq = vec![0.0; pv.len()];
                for (r, (a, b)) in pv.data().chunks(c).zip(qv.data().chunks(c)).enumerate() {
                    if degenerate[r] {
                        continue;
                    }
                    let (na, nb, dot) = norms_and_dot(a, b);
                    let cos = dot / (na * nb);
                    let s = -g[0] / rows;
                    for j in 0..c {
                        dp[r * c + j] = s * (b[j] / (na * nb) - cos * a[j] / (na * na));
                        dq[r * c + j] = s * (a[j] / (na * nb) - cos * b[j] / (nb * nb));
                    }
                }
                out.push((*pred, dp));
                if need(*target) {
                    out.push((*target, dq));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let count = targets.iter().filter(|t| t.is_some()).count().max(1) as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..c {
                            dl[r * c + j] = g[0] * probs[r * c + j] / count;
                        }
                        dl[r * c + t] -= g[0] / count;
                    }
                }
                out.push((*logits, dl));
            }
        }
        out
    }
}

fn column_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for row in g.chunks(c) {
        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    s
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `log softmax(row)[index]`, computed stably.
pub(crate) fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row.iter().map(|v| math::exp(v - max)).sum();
    row[index] - max - math::ln(total)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = math::tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + math::exp(-x))
}

pub(crate) fn mse_value(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64
}

fn norms_and_dot(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let na = math::sqrt(a.iter().map(|v| v * v).sum());
    let nb = math::sqrt(b.iter().map(|v| v * v).sum());
    let dot = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (na, nb, dot)
}

pub(crate) fn cosine_value(p: &[f64], q: &[f64], cols: usize) -> (f64, Vec<bool>) {
    let mut total = 0.0;
    let mut degenerate = Vec::with_capacity(p.len() / cols);
    for (a, b) in p.chunks(cols).zip(q.chunks(cols)) {
        let (na, nb, dot) = norms_and_dot(a, b);
        if na == 0.0 || nb == 0.0 {
            degenerate.push(true);
        } else {
            degenerate.push(false);
            total += dot / (na * nb);
        }
    }
    let n = degenerate.len() as f64;
    (1.0 - total / n, degenerate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_product() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let a = g.constant(t(&[&[1.5, -2.0], &[0.25, 7.0]]));
        let p = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(p), g.value(a));

        let x = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = g.constant(t(&[&[5.0], &[6.0]]));
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z).data(), &[17.0, 39.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let s = g.softmax(x);
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "matmul", .. }));
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            g.add(a, c),
            Err(Error::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn sum_grad_is_ones_and_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::filled(&[2, 3], 0.5));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 6]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn quadratic_gradient() {
        // ||Ax - b||² with A = diag(2, 3), x = [1, 1], b = 0 → 2Aᵀ(Ax - b) = [8, 18].
        let mut g = Graph::new();
        let a = g.constant(t(&[&[2.0, 0.0], &[0.0, 3.0]]));
        let x = g.param(t(&[&[1.0], &[1.0]]));
        let b = g.constant(Tensor::zeros(&[2, 1]));
        let ax = g.matmul(a, x).unwrap();
        let r = g.sub(ax, b).unwrap();
        let sq = g.mul(r, r).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[8.0, 18.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn mask_mul_zeroes_values_and_grads() {
        let mut g = Graph::new();
        let w = g.param(t(&[&[1.0, -2.0], &[3.0, 4.0]]));
        let m = g.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let y = g.mask_mul(w, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0, 4.0]);
        let sq = g.mul(y, y).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        let gw = g.grad(w).unwrap();
        assert_eq!(gw[1].to_bits(), 0.0f64.to_bits());
        assert_eq!(gw[2].to_bits(), 0.0f64.to_bits());
        assert_eq!(gw[0], 2.0);
    }

    #[test]
    fn losses_direct_values() {
        let mut g = Graph::new();
        let p = g.constant(t(&[&[1.0, 0.0]]));
        let q = g.constant(t(&[&[0.0, 1.0]]));
        let mse = g.mse(p, q).unwrap();
        let cs = g.cosine_loss(p, q).unwrap();
        assert_eq!(g.value(mse).data(), &[1.0]);
        assert_eq!(g.value(cs).data(), &[1.0]);

        let a = g.constant(t(&[&[1.0, 2.0], &[-3.0, 0.5]]));
        let na = g.scale(a, -1.0);
        let anti = g.cosine_loss(na, a).unwrap();
        assert!((g.value(anti).data()[0] - 2.0).abs() < 1e-15);
        let same = g.cosine_loss(a, a).unwrap();
        assert!(g.value(same).data()[0].abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_rows_are_orthogonal() {
        let mut g = Graph::new();
        let p = g.param(t(&[&[0.0, 0.0], &[1.0, 1.0]]));
        let q = g.constant(t(&[&[1.0, 0.0], &[1.0, 1.0]]));
        let cs = g.cosine_loss(p, q).unwrap();
        assert!((g.value(cs).data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(g.degenerate_rows(cs), 1);
        g.backward(cs).unwrap();
        assert_eq!(&g.grad(p).unwrap()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_ignores_none() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[2, 4]));
        let ce = g.cross_entropy(l, &[Some(1), None]).unwrap();
        assert!((g.value(ce).data()[0] - 4f64.ln()).abs() < 1e-14);
    }
}
