//! A miniature pre-norm ViT-style encoder with a frozen/trainable partition.
//!
//! Inputs are generic feature vectors chunked into `n_tokens - 1` patches by
//! a learned linear embedding; a learned CLS token is prepended and learned
//! positional embeddings are added. Each block is LN -> multi-head
//! self-attention -> residual, LN -> MLP -> residual. Adapters wrap the
//! entire block: where the placement policy puts one, the block output `h`
//! becomes `h + alpha * A(h)`.
//!
//! All parameters live in a flat, canonically ordered tensor registry so
//! that gradients, optimizer state, the frozen mask, and checkpoints all
//! index the same way.

use sha2::{Digest, Sha256};

use crate::adapter::{
    adapter_forward_traced, init_adapter, AdapterParams, AdapterTrace, InitScheme,
};
use crate::numkernel::{layernorm_cached, softmax_rows, Mat, Rng};
use crate::{Error, Result};

/// LayerNorm stabilizer used throughout the encoder.
pub const LN_EPS: f64 = 1e-5;

/// Backbone weight initialization scale (truncated-normal-free plain
/// Gaussian; the scale matches the adapter down-projection).
pub const BACKBONE_INIT_STD: f64 = 0.02;

/// Rng stream tags; see `Rng::from_seed_stream`.
pub const STREAM_MODEL_INIT: u64 = 0x01;
pub const STREAM_ADAPTER_INIT: u64 = 0x02;

/// The three comparison regimes: train only the head, train adapters plus
/// head over a frozen backbone, or train everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    HeadOnly,
    AdapterTune,
    FullFineTune,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::HeadOnly => "head_only",
            Regime::AdapterTune => "adapter_tune",
            Regime::FullFineTune => "full_finetune",
        };
        write!(f, "{s}")
    }
}

/// Backbone / adapter / head geometry plus the adaptation regime.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub l_blocks: usize,
    pub heads: usize,
    pub n_tokens: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    pub rank: usize,
    pub alpha: f64,
    pub every_k: usize,
    pub init: InitScheme,
    pub regime: Regime,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            l_blocks: 4,
            heads: 4,
            n_tokens: 5,
            mlp_ratio: 2.0,
            classes: 8,
            rank: 16,
            alpha: 1.0,
            every_k: 1,
            init: InitScheme::Zero,
            regime: Regime::AdapterTune,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::invalid(format!(
                "heads ({}) must divide hidden dim ({})",
                self.heads, self.d
            )));
        }
        if self.l_blocks < 1 {
            return Err(Error::invalid("need at least one block"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.rank < 1 || self.rank > self.d {
            return Err(Error::invalid(format!(
                "rank {} out of range 1..={}",
                self.rank, self.d
            )));
        }
        if self.every_k < 1 {
            return Err(Error::invalid("every_k must be >= 1"));
        }
        if self.n_tokens < 2 {
            return Err(Error::invalid("need at least one patch token beside CLS"));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::invalid("mlp_ratio must be > 0"));
        }
        self.init.validate()
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.mlp_ratio * self.d as f64).round() as usize).max(1)
    }
}

/// Block indices that receive an adapter: every `every_k`-th block, i.e.
/// `{k-1, 2k-1, ...}`, which is `floor(L/k)` adapters in total.
pub fn adapter_positions(l_blocks: usize, every_k: usize) -> Vec<usize> {
    (0..l_blocks)
        .filter(|b| (b + 1) % every_k == 0)
        .collect()
}

/// One transformer block's parameters (pre-norm attention + MLP).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Mat,
    pub ln1_beta: Mat,
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln2_gamma: Mat,
    pub ln2_beta: Mat,
    pub fc1_w: Mat,
    pub fc1_b: Mat,
    pub fc2_w: Mat,
    pub fc2_b: Mat,
}

pub const TENSORS_PER_BLOCK: usize = 16;
pub const TENSORS_PER_ADAPTER: usize = 4;

/// Rough role of a tensor, used for the weight-decay exclusion rule
/// (decay applies to `Weight` only, never biases or LayerNorm affines).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub kind: ParamKind,
}

/// Full encoder state: embedding, blocks, adapters at their placement
/// positions, classification head, and the per-tensor frozen mask.
///
/// `revision` counts parameter mutations; forward caches record it so stale
/// caches are rejected by the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub cfg: ModelConfig,
    pub input_dim: usize,
    pub embed_w: Mat, // d x patch_dim
    pub embed_b: Mat, // d x 1
    pub cls: Mat,     // 1 x d
    pub pos: Mat,     // n_tokens x d
    pub blocks: Vec<BlockParams>,
    pub adapters: Vec<(usize, AdapterParams)>, // (block index, params), ascending
    pub head_w: Mat, // C x d
    pub head_b: Mat, // C x 1
    pub frozen: Vec<bool>,
    pub revision: u64,
}

impl EncoderState {
    /// Fresh random encoder with no adapters and nothing frozen (the state
    /// a pretraining run starts from). Draw order is fixed: embedding, CLS,
    /// positions, then per block q/k/v/o and the two MLP weights, then the
    /// head.
    pub fn init(cfg: &ModelConfig, input_dim: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let patches = cfg.n_tokens - 1;
        if input_dim == 0 || input_dim % patches != 0 {
            return Err(Error::invalid(format!(
                "input dim {} not divisible into {} patches",
                input_dim, patches
            )));
        }
        let patch_dim = input_dim / patches;
        let d = cfg.d;
        let m = cfg.mlp_hidden();
        let std = BACKBONE_INIT_STD;

        let embed_w = Mat::gaussian(d, patch_dim, 0.0, std, rng);
        let cls = Mat::gaussian(1, d, 0.0, std, rng);
        let pos = Mat::gaussian(cfg.n_tokens, d, 0.0, std, rng);
        let mut blocks = Vec::with_capacity(cfg.l_blocks);
        for _ in 0..cfg.l_blocks {
            blocks.push(BlockParams {
                ln1_gamma: Mat::from_vec(1, d, vec![1.0; d])?,
                ln1_beta: Mat::zeros(1, d),
                wq: Mat::gaussian(d, d, 0.0, std, rng),
                bq: Mat::zeros(d, 1),
                wk: Mat::gaussian(d, d, 0.0, std, rng),
                bk: Mat::zeros(d, 1),
                wv: Mat::gaussian(d, d, 0.0, std, rng),
                bv: Mat::zeros(d, 1),
                wo: Mat::gaussian(d, d, 0.0, std, rng),
                bo: Mat::zeros(d, 1),
                ln2_gamma: Mat::from_vec(1, d, vec![1.0; d])?,
                ln2_beta: Mat::zeros(1, d),
                fc1_w: Mat::gaussian(m, d, 0.0, std, rng),
                fc1_b: Mat::zeros(m, 1),
                fc2_w: Mat::gaussian(d, m, 0.0, std, rng),
                fc2_b: Mat::zeros(d, 1),
            });
        }
        let head_w = Mat::gaussian(cfg.classes, d, 0.0, std, rng);
        let head_b = Mat::zeros(cfg.classes, 1);

        let mut state = EncoderState {
            cfg: cfg.clone(),
            input_dim,
            embed_w,
            embed_b: Mat::zeros(d, 1),
            cls,
            pos,
            blocks,
            adapters: Vec::new(),
            head_w,
            head_b,
            frozen: Vec::new(),
            revision: 0,
        };
        state.frozen = vec![false; state.num_tensors()];
        Ok(state)
    }

    /// Attaches freshly initialized adapters at the placement positions,
    /// resets the head to zero for the downstream task, and freezes tensors
    /// according to the configured regime.
    pub fn prepare_downstream(&mut self, rng: &mut Rng) -> Result<()> {
        let cfg = self.cfg.clone();
        self.adapters.clear();
        for b in adapter_positions(cfg.l_blocks, cfg.every_k) {
            let params = init_adapter(cfg.d, cfg.rank, cfg.alpha, cfg.init, rng)?;
            self.adapters.push((b, params));
        }
        self.head_w = Mat::zeros(cfg.classes, cfg.d);
        self.head_b = Mat::zeros(cfg.classes, 1);
        self.apply_regime();
        self.revision += 1;
        Ok(())
    }

    /// Rebuilds the frozen mask from `cfg.regime`.
    pub fn apply_regime(&mut self) {
        let n = self.num_tensors();
        let specs = self.tensor_specs();
        self.frozen = (0..n)
            .map(|i| match self.cfg.regime {
                Regime::FullFineTune => false,
                Regime::HeadOnly => !specs[i].name.starts_with("head."),
                Regime::AdapterTune => {
                    !(specs[i].name.starts_with("head.") || specs[i].name.starts_with("adapter"))
                }
            })
            .collect();
    }

    pub fn num_tensors(&self) -> usize {
        4 + TENSORS_PER_BLOCK * self.blocks.len() + TENSORS_PER_ADAPTER * self.adapters.len() + 2
    }

    /// All parameter tensors in canonical registry order.
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut v = Vec::with_capacity(self.num_tensors());
        v.push(&self.embed_w);
        v.push(&self.embed_b);
        v.push(&self.cls);
        v.push(&self.pos);
        for b in &self.blocks {
            v.extend([
                &b.ln1_gamma,
                &b.ln1_beta,
                &b.wq,
                &b.bq,
                &b.wk,
                &b.bk,
                &b.wv,
                &b.bv,
                &b.wo,
                &b.bo,
                &b.ln2_gamma,
                &b.ln2_beta,
                &b.fc1_w,
                &b.fc1_b,
                &b.fc2_w,
                &b.fc2_b,
            ]);
        }
        for (_, a) in &self.adapters {
            v.extend([&a.w_down, &a.b_down, &a.w_up, &a.b_up]);
        }
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = Vec::with_capacity(self.num_tensors());
        v.push(&mut self.embed_w);
        v.push(&mut self.embed_b);
        v.push(&mut self.cls);
        v.push(&mut self.pos);
        for b in &mut self.blocks {
            v.extend([
                &mut b.ln1_gamma,
                &mut b.ln1_beta,
                &mut b.wq,
                &mut b.bq,
                &mut b.wk,
                &mut b.bk,
                &mut b.wv,
                &mut b.bv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln2_gamma,
                &mut b.ln2_beta,
                &mut b.fc1_w,
                &mut b.fc1_b,
                &mut b.fc2_w,
                &mut b.fc2_b,
            ]);
        }
        for (_, a) in &mut self.adapters {
            v.extend([&mut a.w_down, &mut a.b_down, &mut a.w_up, &mut a.b_up]);
        }
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        use ParamKind::*;
        let mut v = Vec::with_capacity(self.num_tensors());
        let mut push = |name: String, kind: ParamKind| v.push(TensorSpec { name, kind });
        push("embed.w".into(), Weight);
        push("embed.b".into(), Bias);
        push("cls".into(), Weight);
        push("pos".into(), Weight);
        for b in 0..self.blocks.len() {
            for (suffix, kind) in [
                ("ln1.gamma", Norm),
                ("ln1.beta", Norm),
                ("attn.wq", Weight),
                ("attn.bq", Bias),
                ("attn.wk", Weight),
                ("attn.bk", Bias),
                ("attn.wv", Weight),
                ("attn.bv", Bias),
                ("attn.wo", Weight),
                ("attn.bo", Bias),
                ("ln2.gamma", Norm),
                ("ln2.beta", Norm),
                ("mlp.fc1.w", Weight),
                ("mlp.fc1.b", Bias),
                ("mlp.fc2.w", Weight),
                ("mlp.fc2.b", Bias),
            ] {
                push(format!("block{b}.{suffix}"), kind);
            }
        }
        for (slot, (blk, _)) in self.adapters.iter().enumerate() {
            for (suffix, kind) in [
                ("w_down", Weight),
                ("b_down", Bias),
                ("w_up", Weight),
                ("b_up", Bias),
            ] {
                push(format!("adapter{slot}.block{blk}.{suffix}"), kind);
            }
        }
        push("head.w".into(), Weight);
        push("head.b".into(), Bias);
        v
    }

    /// Index arithmetic into the registry; offsets follow the field order
    /// of [`BlockParams`] and [`AdapterParams`].
    pub fn idx_block(&self, block: usize, offset: usize) -> usize {
        4 + block * TENSORS_PER_BLOCK + offset
    }

    pub fn idx_adapter(&self, slot: usize, offset: usize) -> usize {
        4 + self.blocks.len() * TENSORS_PER_BLOCK + slot * TENSORS_PER_ADAPTER + offset
    }

    pub fn idx_head_w(&self) -> usize {
        self.num_tensors() - 2
    }

    pub fn idx_head_b(&self) -> usize {
        self.num_tensors() - 1
    }

    /// Number of scalar parameters across all tensors (the full fine-tuning
    /// budget for this geometry).
    pub fn total_param_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over dimensions and little-endian payloads of every frozen
    /// tensor, in registry order. Training must never change this.
    pub fn frozen_digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (idx, t) in self.tensors().iter().enumerate() {
            if !self.frozen[idx] {
                continue;
            }
            hasher.update((t.rows() as u64).to_le_bytes());
            hasher.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    /// Adapter slot present at a given block, if any.
    pub fn adapter_at_block(&self, block: usize) -> Option<usize> {
        self.adapters.iter().position(|(b, _)| *b == block)
    }

    pub fn patch_dim(&self) -> usize {
        self.input_dim / (self.cfg.n_tokens - 1)
    }
}

/// Per-block forward intermediates retained for backpropagation.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub x0: Mat,
    pub xhat1: Mat,
    pub inv_std1: Vec<f64>,
    pub a1: Mat,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    pub attn: Vec<Mat>, // one n x n matrix per head
    pub ctx: Mat,
    pub h2: Mat,
    pub xhat2: Mat,
    pub inv_std2: Vec<f64>,
    pub a2: Mat,
    pub m1: Mat,
    pub g1: Mat,
    pub h3: Mat,
    pub adapter: Option<AdapterTrace>,
    pub h_out: Mat,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub revision: u64,
    pub input: Mat,
    pub tokens0: Mat,
    pub blocks: Vec<BlockTrace>,
    pub cls_out: Mat, // 1 x d
    pub logits: Mat,  // 1 x C
}

/// Runs the encoder on one input vector (`1 x input_dim`), returning the
/// CLS feature after the final block together with the forward cache.
pub fn encode(state: &EncoderState, x: &Mat) -> Result<(Mat, ForwardCache)> {
    let cache = forward_full(state, x)?;
    Ok((cache.cls_out.clone(), cache))
}

/// Head logits for one input: `head_w * cls_feature + head_b`.
pub fn classify(state: &EncoderState, x: &Mat) -> Result<Mat> {
    Ok(forward_full(state, x)?.logits)
}

pub fn forward_full(state: &EncoderState, x: &Mat) -> Result<ForwardCache> {
    if x.rows() != 1 || x.cols() != state.input_dim {
        return Err(Error::ShapeMismatch {
            op: "encode",
            left_rows: x.rows(),
            left_cols: x.cols(),
            right_rows: 1,
            right_cols: state.input_dim,
        });
    }
    let cfg = &state.cfg;
    let n = cfg.n_tokens;
    let d = cfg.d;
    let patch_dim = state.patch_dim();

    // Token assembly: CLS row, then one embedded patch per row, plus the
    // positional table.
    let mut tokens = Mat::zeros(n, d);
    tokens.row_mut(0).copy_from_slice(state.cls.row(0));
    let embed_wt = state.embed_w.transpose();
    for t in 1..n {
        let patch = Mat::from_vec(
            1,
            patch_dim,
            x.row(0)[(t - 1) * patch_dim..t * patch_dim].to_vec(),
        )?;
        let emb = patch.matmul(&embed_wt)?;
        let row = tokens.row_mut(t);
        for (c, dst) in row.iter_mut().enumerate() {
            *dst = emb.get(0, c) + state.embed_b.get(c, 0);
        }
    }
    let tokens0 = tokens.add(&state.pos)?;

    let mut h = tokens0.clone();
    let mut blocks = Vec::with_capacity(cfg.l_blocks);
    for (bi, blk) in state.blocks.iter().enumerate() {
        let trace = block_forward(state, blk, state.adapter_at_block(bi), &h)?;
        h = trace.h_out.clone();
        blocks.push(trace);
    }

    let cls_out = Mat::from_vec(1, d, h.row(0).to_vec())?;
    let mut logits = cls_out.matmul(&state.head_w.transpose())?;
    for c in 0..cfg.classes {
        let v = logits.get(0, c) + state.head_b.get(c, 0);
        logits.set(0, c, v);
    }
    Ok(ForwardCache {
        revision: state.revision,
        input: x.clone(),
        tokens0,
        blocks,
        cls_out,
        logits,
    })
}

/// `y = x W^T + b` for row-major activations, `W: out x in`, `b: out x 1`.
pub(crate) fn linear(x: &Mat, w: &Mat, b: &Mat) -> Result<Mat> {
    let mut y = x.matmul(&w.transpose())?;
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        for (c, v) in row.iter_mut().enumerate() {
            *v += b.get(c, 0);
        }
    }
    Ok(y)
}

fn block_forward(
    state: &EncoderState,
    blk: &BlockParams,
    adapter_slot: Option<usize>,
    x0: &Mat,
) -> Result<BlockTrace> {
    let cfg = &state.cfg;
    let n = cfg.n_tokens;
    let d = cfg.d;
    let dh = d / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (a1, xhat1, inv_std1) = layernorm_cached(x0, &blk.ln1_gamma, &blk.ln1_beta, LN_EPS)?;
    let q = linear(&a1, &blk.wq, &blk.bq)?;
    let k = linear(&a1, &blk.wk, &blk.bk)?;
    let v = linear(&a1, &blk.wv, &blk.bv)?;

    let mut ctx = Mat::zeros(n, d);
    let mut attn = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let qh = q.col_slice(head * dh, dh);
        let kh = k.col_slice(head * dh, dh);
        let vh = v.col_slice(head * dh, dh);
        let scores = qh.matmul(&kh.transpose())?.scale(scale);
        let probs = softmax_rows(&scores);
        let ctx_h = probs.matmul(&vh)?;
        ctx.set_col_slice(head * dh, &ctx_h);
        attn.push(probs);
    }
    let o = linear(&ctx, &blk.wo, &blk.bo)?;
    let h2 = x0.add(&o)?;

    let (a2, xhat2, inv_std2) = layernorm_cached(&h2, &blk.ln2_gamma, &blk.ln2_beta, LN_EPS)?;
    let m1 = linear(&a2, &blk.fc1_w, &blk.fc1_b)?;
    let g1 = m1.map(crate::numkernel::gelu);
    let m2 = linear(&g1, &blk.fc2_w, &blk.fc2_b)?;
    let h3 = h2.add(&m2)?;

    let (adapter, h_out) = match adapter_slot {
        Some(slot) => {
            let params = &state.adapters[slot].1;
            let trace = adapter_forward_traced(params, &h3)?;
            let h4 = h3.add(&trace.out.scale(params.alpha))?;
            (Some(trace), h4)
        }
        None => (None, h3.clone()),
    };

    Ok(BlockTrace {
        x0: x0.clone(),
        xhat1,
        inv_std1,
        a1,
        q,
        k,
        v,
        attn,
        ctx,
        h2,
        xhat2,
        inv_std2,
        a2,
        m1,
        g1,
        h3,
        adapter,
        h_out,
    })
}
