use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, NormKind};
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Which copy of the prunable matrices a forward pass reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Weights {
    Dense,
    Pruned,
}

/// The six prunable matrices of a block, in depth order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MatrixKind {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 6] = [
        MatrixKind::Query,
        MatrixKind::Key,
        MatrixKind::Value,
        MatrixKind::Output,
        MatrixKind::Up,
        MatrixKind::Down,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_attention(self) -> bool {
        self.index() < 4
    }

    /// Whether the matrix reads the normalized residual (as opposed to the
    /// attention context or the MLP activation).
    pub fn reads_normed(self) -> bool {
        matches!(
            self,
            MatrixKind::Query | MatrixKind::Key | MatrixKind::Value | MatrixKind::Up
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            MatrixKind::Query => "wq",
            MatrixKind::Key => "wk",
            MatrixKind::Value => "wv",
            MatrixKind::Output => "wo",
            MatrixKind::Up => "w1",
            MatrixKind::Down => "w2",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NormSite {
    Attn(usize),
    Mlp(usize),
    Final,
}

/// Names one parameter tensor of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamRef {
    TokEmb,
    PosEmb,
    Matrix { block: usize, kind: MatrixKind },
    NormGain(NormSite),
    NormBias(NormSite),
    LmHead,
}

/// Dense weights, pruned weights and their binary mask.
///
/// Invariant: `pruned` is exactly zero wherever `mask` is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunableMatrix {
    pub dense: Tensor,
    pub pruned: Tensor,
    pub mask: Tensor,
}

impl PrunableMatrix {
    pub fn new(dense: Tensor) -> Self {
        let mask = Tensor::ones(dense.shape());
        Self {
            pruned: dense.clone(),
            dense,
            mask,
        }
    }

    /// Installs a mask and resets the pruned copy to `mask ⊙ dense`.
    pub fn set_mask(&mut self, mask: Tensor) -> Result<()> {
        self.pruned = self.dense.hadamard(&mask)?;
        self.mask = mask;
        Ok(())
    }

    /// Installs a mask together with explicitly reconstructed weights.
    pub fn set_pruned(&mut self, mask: Tensor, weights: Tensor) -> Result<()> {
        self.pruned = weights.hadamard(&mask)?;
        self.mask = mask;
        Ok(())
    }

    /// Forces pruned entries to exactly zero.
    pub fn enforce_mask(&mut self) {
        for (w, m) in self.pruned.data_mut().iter_mut().zip(self.mask.data()) {
            if *m == 0.0 {
                *w = 0.0;
            }
        }
    }

    /// Number of entries with `mask == 0` but a non-zero pruned weight.
    pub fn mask_violations(&self) -> usize {
        self.pruned
            .data()
            .iter()
            .zip(self.mask.data())
            .filter(|(w, m)| **m == 0.0 && **w != 0.0)
            .count()
    }

    pub fn density(&self) -> f64 {
        self.mask.sum() / self.mask.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Option<Tensor>,
}

impl Norm {
    fn new(kind: NormKind, d: usize) -> Self {
        Self {
            gain: Tensor::ones(&[d]),
            bias: match kind {
                NormKind::LayerNorm => Some(Tensor::zeros(&[d])),
                NormKind::RmsNorm => None,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Norm,
    pub mlp_norm: Norm,
    pub matrices: [PrunableMatrix; 6],
}

/// Token ids laid out as `batch` sequences of `seq` tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokens {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl Tokens {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::ShapeMismatch {
                op: "tokens",
                detail: format!("{} ids for {batch}x{seq}", ids.len()),
            });
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.seq..(i + 1) * self.seq]
    }

    /// Selects a subset of sequences.
    pub fn select(&self, rows: &[usize]) -> Tokens {
        let ids = rows
            .iter()
            .flat_map(|&r| self.row(r).iter().copied())
            .collect();
        Tokens {
            batch: rows.len(),
            seq: self.seq,
            ids,
        }
    }
}

/// Inputs of the prunable matrices of one sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct SublayerInputs {
    /// Normalized residual: input of Wq/Wk/Wv (attention) or W1 (MLP).
    pub normed: Tensor,
    /// Attention context (input of Wo) or MLP activation (input of W2).
    pub inner: Tensor,
}

/// Activations captured by [`GptModel::forward_with_taps`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTaps {
    /// `[batch, seq, vocab]`.
    pub logits: Tensor,
    /// Residual stream at every sublayer boundary: index 0 is the embedding
    /// output, index `2 * n_blocks` the output of the last block.
    pub residual: Vec<Tensor>,
    /// Matrix inputs for every sublayer, indexed like the sublayers.
    pub sublayers: Vec<SublayerInputs>,
}

impl ForwardTaps {
    /// Hidden state handed to the final norm and LM head.
    pub fn final_hidden(&self) -> &Tensor {
        self.residual.last().expect("at least the embedding tap")
    }

    pub fn matrix_input(&self, block: usize, kind: MatrixKind) -> &Tensor {
        sublayer_matrix_input(&self.sublayers[sublayer_of(block, kind)], kind)
    }
}

pub(crate) fn sublayer_of(block: usize, kind: MatrixKind) -> usize {
    2 * block + usize::from(!kind.is_attention())
}

pub(crate) fn sublayer_matrix_input(s: &SublayerInputs, kind: MatrixKind) -> &Tensor {
    if kind.reads_normed() {
        &s.normed
    } else {
        &s.inner
    }
}

/// Decoder-only transformer with pre-norm blocks and learned absolute
/// position embeddings. Linear layers carry no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GptModel {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    /// `None` when the head is tied to the token embedding.
    pub lm_head: Option<Tensor>,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller; u1 in (0, 1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    std * math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| normal(rng, std)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

impl GptModel {
    /// GPT-2 style initialization: N(0, 0.02), residual projections scaled by
    /// `1/sqrt(2 n_blocks)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (config.d_model, config.d_ff);
        let std = 0.02;
        let resid_std = std / math::sqrt(2.0 * config.n_blocks as f64);
        let tok_emb = random_matrix(&mut rng, config.vocab, d, std);
        let pos_emb = random_matrix(&mut rng, config.seq_len, d, std);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            let matrices = [
                PrunableMatrix::new(random_matrix(&mut rng, d, d, std)),
                PrunableMatrix::new(random_matrix(&mut rng, d, d, std)),
                PrunableMatrix::new(random_matrix(&mut rng, d, d, std)),
                PrunableMatrix::new(random_matrix(&mut rng, d, d, resid_std)),
                PrunableMatrix::new(random_matrix(&mut rng, f, d, std)),
                PrunableMatrix::new(random_matrix(&mut rng, d, f, resid_std)),
            ];
            blocks.push(Block {
                attn_norm: Norm::new(config.norm_kind, d),
                mlp_norm: Norm::new(config.norm_kind, d),
                matrices,
            });
        }
        let lm_head = (!config.tie_lm_head).then(|| random_matrix(&mut rng, config.vocab, d, std));
        Ok(Self {
            final_norm: Norm::new(config.norm_kind, d),
            config,
            tok_emb,
            pos_emb,
            blocks,
            lm_head,
        })
    }

    pub fn matrix(&self, block: usize, kind: MatrixKind) -> &PrunableMatrix {
        &self.blocks[block].matrices[kind.index()]
    }

    pub fn matrix_mut(&mut self, block: usize, kind: MatrixKind) -> &mut PrunableMatrix {
        &mut self.blocks[block].matrices[kind.index()]
    }

    /// Every prunable matrix, in depth order.
    pub fn prunable_refs(&self) -> Vec<ParamRef> {
        (0..self.config.n_blocks)
            .flat_map(|block| {
                MatrixKind::ALL
                    .into_iter()
                    .map(move |kind| ParamRef::Matrix { block, kind })
            })
            .collect()
    }

    /// Gains and biases of every normalization layer, in depth order.
    pub fn norm_refs(&self) -> Vec<ParamRef> {
        let mut sites: Vec<NormSite> = (0..self.config.n_blocks)
            .flat_map(|b| [NormSite::Attn(b), NormSite::Mlp(b)])
            .collect();
        sites.push(NormSite::Final);
        let has_bias = self.config.norm_kind == NormKind::LayerNorm;
        sites
            .into_iter()
            .flat_map(|s| {
                let mut v = vec![ParamRef::NormGain(s)];
                if has_bias {
                    v.push(ParamRef::NormBias(s));
                }
                v
            })
            .collect()
    }

    /// Resolves a tied LM head to the token embedding.
    pub fn canonical(&self, r: ParamRef) -> ParamRef {
        match r {
            ParamRef::LmHead if self.lm_head.is_none() => ParamRef::TokEmb,
            other => other,
        }
    }

    fn norm(&self, site: NormSite) -> &Norm {
        match site {
            NormSite::Attn(b) => &self.blocks[b].attn_norm,
            NormSite::Mlp(b) => &self.blocks[b].mlp_norm,
            NormSite::Final => &self.final_norm,
        }
    }

    fn norm_mut(&mut self, site: NormSite) -> &mut Norm {
        match site {
            NormSite::Attn(b) => &mut self.blocks[b].attn_norm,
            NormSite::Mlp(b) => &mut self.blocks[b].mlp_norm,
            NormSite::Final => &mut self.final_norm,
        }
    }

    /// The tensor a reference denotes under the given weight selection.
    pub fn param(&self, r: ParamRef, weights: Weights) -> &Tensor {
        match self.canonical(r) {
            ParamRef::TokEmb => &self.tok_emb,
            ParamRef::PosEmb => &self.pos_emb,
            ParamRef::Matrix { block, kind } => {
                let m = self.matrix(block, kind);
                match weights {
                    Weights::Dense => &m.dense,
                    Weights::Pruned => &m.pruned,
                }
            }
            ParamRef::NormGain(s) => &self.norm(s).gain,
            ParamRef::NormBias(s) => self.norm(s).bias.as_ref().expect("layernorm bias"),
            ParamRef::LmHead => self.lm_head.as_ref().expect("untied head"),
        }
    }

    pub fn param_mut(&mut self, r: ParamRef, weights: Weights) -> &mut Tensor {
        match self.canonical(r) {
            ParamRef::TokEmb => &mut self.tok_emb,
            ParamRef::PosEmb => &mut self.pos_emb,
            ParamRef::Matrix { block, kind } => {
                let m = self.matrix_mut(block, kind);
                match weights {
                    Weights::Dense => &mut m.dense,
                    Weights::Pruned => &mut m.pruned,
                }
            }
            ParamRef::NormGain(s) => &mut self.norm_mut(s).gain,
            ParamRef::NormBias(s) => self.norm_mut(s).bias.as_mut().expect("layernorm bias"),
            ParamRef::LmHead => self.lm_head.as_mut().expect("untied head"),
        }
    }

    /// Mask of a prunable matrix; `None` for parameters that are never pruned.
    pub fn mask(&self, r: ParamRef) -> Option<&Tensor> {
        match r {
            ParamRef::Matrix { block, kind } => Some(&self.matrix(block, kind).mask),
            _ => None,
        }
    }

    /// Drops all masks and copies dense weights into the pruned slots. Norms,
    /// embeddings and head are shared between the two views.
    pub fn reset_pruning(&mut self) {
        for block in &mut self.blocks {
            for m in &mut block.matrices {
                *m = PrunableMatrix::new(m.dense.clone());
            }
        }
    }

    /// Forces every pruned entry of every matrix to zero.
    pub fn enforce_masks(&mut self) {
        for block in &mut self.blocks {
            block
                .matrices
                .iter_mut()
                .for_each(PrunableMatrix::enforce_mask);
        }
    }

    /// Total count of pruned-but-nonzero entries across the model.
    pub fn mask_violations(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.matrices.iter())
            .map(PrunableMatrix::mask_violations)
            .sum()
    }

    pub fn prunable_param_count(&self) -> usize {
        self.config.n_blocks * self.config.block_matrix_params()
    }

    // --- graph construction -------------------------------------------------

    pub fn embed(&self, g: &mut Graph, binder: &mut Binder, tokens: &Tokens) -> Result<NodeId> {
        if tokens.seq > self.config.seq_len {
            return Err(Error::ShapeMismatch {
                op: "embed",
                detail: format!(
                    "sequence length {} exceeds {}",
                    tokens.seq, self.config.seq_len
                ),
            });
        }
        let tok = binder.get(g, ParamRef::TokEmb);
        let pos = binder.get(g, ParamRef::PosEmb);
        let x = g.embed(tok, &tokens.ids)?;
        let positions: Vec<usize> = (0..tokens.batch).flat_map(|_| 0..tokens.seq).collect();
        let p = g.embed(pos, &positions)?;
        g.add(x, p)
    }

    fn apply_norm(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        site: NormSite,
        x: NodeId,
    ) -> Result<NodeId> {
        let gain = binder.get(g, ParamRef::NormGain(site));
        match self.config.norm_kind {
            NormKind::LayerNorm => {
                let bias = binder.get(g, ParamRef::NormBias(site));
                g.layernorm(x, gain, bias)
            }
            NormKind::RmsNorm => g.rmsnorm(x, gain),
        }
    }

    /// `x · Wᵀ` for one prunable matrix.
    pub fn linear(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        block: usize,
        kind: MatrixKind,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = binder.get(g, ParamRef::Matrix { block, kind });
        g.linear(x, w)
    }

    fn attention(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        block: usize,
        normed: NodeId,
        seq: usize,
    ) -> Result<(NodeId, NodeId)> {
        let q = self.linear(g, binder, block, MatrixKind::Query, normed)?;
        let k = self.linear(g, binder, block, MatrixKind::Key, normed)?;
        let v = self.linear(g, binder, block, MatrixKind::Value, normed)?;
        let rows = g.value(normed).rows();
        let batch = rows / seq;
        let (heads, dh) = (self.config.n_heads, self.config.head_dim());
        let mut causal = Tensor::zeros(&[seq, seq]);
        for i in 0..seq {
            for j in i + 1..seq {
                causal.set(i, j, f64::NEG_INFINITY);
            }
        }
        let causal = g.constant(causal);
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut samples = Vec::with_capacity(batch);
        for s in 0..batch {
            let mut head_ctx = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.slice(q, s * seq, h * dh, seq, dh)?;
                let kh = g.slice(k, s * seq, h * dh, seq, dh)?;
                let vh = g.slice(v, s * seq, h * dh, seq, dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let scores = g.add(scores, causal)?;
                let probs = g.softmax(scores);
                head_ctx.push(g.matmul(probs, vh)?);
            }
            samples.push(g.concat_cols(&head_ctx)?);
        }
        let ctx = if samples.len() == 1 {
            samples[0]
        } else {
            g.concat_rows(&samples)?
        };
        let out = self.linear(g, binder, block, MatrixKind::Output, ctx)?;
        Ok((ctx, out))
    }

    fn mlp(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        block: usize,
        normed: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let h = self.linear(g, binder, block, MatrixKind::Up, normed)?;
        let act = match self.config.norm_kind {
            NormKind::LayerNorm => g.gelu(h),
            NormKind::RmsNorm => g.silu(h),
        };
        let out = self.linear(g, binder, block, MatrixKind::Down, act)?;
        Ok((act, out))
    }

    /// One residual sublayer: `x + attn(norm(x))` for even indices,
    /// `x + mlp(norm(x))` for odd ones. Returns the new residual and the node
    /// ids of the matrix inputs (normalized input, inner activation).
    pub fn sublayer(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        index: usize,
        x: NodeId,
        seq: usize,
    ) -> Result<(NodeId, [NodeId; 2])> {
        let block = index / 2;
        if index % 2 == 0 {
            let normed = self.apply_norm(g, binder, NormSite::Attn(block), x)?;
            let (ctx, out) = self.attention(g, binder, block, normed, seq)?;
            Ok((g.add(x, out)?, [normed, ctx]))
        } else {
            let normed = self.apply_norm(g, binder, NormSite::Mlp(block), x)?;
            let (act, out) = self.mlp(g, binder, block, normed)?;
            Ok((g.add(x, out)?, [normed, act]))
        }
    }

    /// Final norm followed by the LM head.
    pub fn head(&self, g: &mut Graph, binder: &mut Binder, x: NodeId) -> Result<NodeId> {
        let h = self.apply_norm(g, binder, NormSite::Final, x)?;
        let w = binder.get(g, ParamRef::LmHead);
        g.linear(h, w)
    }

    /// Full forward pass producing logits `[rows, vocab]` as a graph node.
    pub fn logits(&self, g: &mut Graph, binder: &mut Binder, tokens: &Tokens) -> Result<NodeId> {
        let mut x = self.embed(g, binder, tokens)?;
        for i in 0..self.config.n_sublayers() {
            x = self.sublayer(g, binder, i, x, tokens.seq)?.0;
        }
        self.head(g, binder, x)
    }

    /// Embedding output (residual tap 0) without gradients.
    pub fn embed_tokens(&self, tokens: &Tokens) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut binder = Binder::frozen(self, Weights::Dense);
        let x = self.embed(&mut g, &mut binder, tokens)?;
        Ok(g.take_value(x))
    }

    /// Runs sublayers `[start, end)` on a residual-stream tensor without
    /// recording gradients. Returns the residual after every sublayer and the
    /// matrix inputs of every sublayer.
    pub fn run_sublayers(
        &self,
        weights: Weights,
        x: &Tensor,
        start: usize,
        end: usize,
        seq: usize,
    ) -> Result<(Vec<Tensor>, Vec<SublayerInputs>)> {
        let mut g = Graph::new();
        let mut binder = Binder::frozen(self, weights);
        let mut node = g.constant(x.clone());
        let mut residual = Vec::with_capacity(end - start);
        let mut inputs = Vec::with_capacity(end - start);
        for i in start..end {
            let (next, [a, b]) = self.sublayer(&mut g, &mut binder, i, node, seq)?;
            inputs.push(SublayerInputs {
                normed: g.value(a).clone(),
                inner: g.value(b).clone(),
            });
            residual.push(g.value(next).clone());
            node = next;
        }
        Ok((residual, inputs))
    }

    /// Forward pass recording the residual stream at every sublayer boundary
    /// and the input of every prunable matrix.
    pub fn forward_with_taps(&self, tokens: &Tokens, weights: Weights) -> Result<ForwardTaps> {
        let mut g = Graph::new();
        let mut binder = Binder::frozen(self, weights);
        let mut x = self.embed(&mut g, &mut binder, tokens)?;
        let mut residual = vec![g.value(x).clone()];
        let mut sublayers = Vec::with_capacity(self.config.n_sublayers());
        for i in 0..self.config.n_sublayers() {
            let (next, [a, b]) = self.sublayer(&mut g, &mut binder, i, x, tokens.seq)?;
            sublayers.push(SublayerInputs {
                normed: g.value(a).clone(),
                inner: g.value(b).clone(),
            });
            residual.push(g.value(next).clone());
            x = next;
        }
        let logits = self.head(&mut g, &mut binder, x)?;
        let logits =
            g.take_value(logits)
                .reshaped(&[tokens.batch, tokens.seq, self.config.vocab])?;
        Ok(ForwardTaps {
            logits,
            residual,
            sublayers,
        })
    }
}

/// Places model parameters into a graph, as trainable leaves or constants.
///
/// Trainable prunable matrices under [`Weights::Pruned`] enter through a
/// mask multiplication so pruned entries get exactly zero gradient.
pub struct Binder<'m> {
    model: &'m GptModel,
    weights: Weights,
    trainable: Vec<ParamRef>,
    cache: Vec<(ParamRef, NodeId)>,
    leaves: Vec<(ParamRef, NodeId)>,
}

impl<'m> Binder<'m> {
    pub fn new(model: &'m GptModel, weights: Weights, trainable: &[ParamRef]) -> Self {
        let mut trainable: Vec<ParamRef> = trainable.iter().map(|&r| model.canonical(r)).collect();
        trainable.sort();
        trainable.dedup();
        Self {
            model,
            weights,
            trainable,
            cache: Vec::new(),
            leaves: Vec::new(),
        }
    }

    pub fn frozen(model: &'m GptModel, weights: Weights) -> Self {
        Self::new(model, weights, &[])
    }

    pub fn get(&mut self, g: &mut Graph, r: ParamRef) -> NodeId {
        let r = self.model.canonical(r);
        if let Some(&(_, id)) = self.cache.iter().find(|(c, _)| *c == r) {
            return id;
        }
        let value = self.model.param(r, self.weights).clone();
        let id = if self.trainable.binary_search(&r).is_ok() {
            let leaf = g.param(value);
            self.leaves.push((r, leaf));
            match (self.weights, self.model.mask(r)) {
                (Weights::Pruned, Some(mask)) => {
                    let m = g.constant(mask.clone());
                    g.mask_mul(leaf, m).expect("mask has the matrix shape")
                }
                _ => leaf,
            }
        } else {
            g.constant(value)
        };
        self.cache.push((r, id));
        id
    }

    /// Trainable leaves bound so far.
    pub fn leaves(&self) -> &[(ParamRef, NodeId)] {
        &self.leaves
    }

    pub fn weights(&self) -> Weights {
        self.weights
    }
}
