//! Cross-entropy training over the trainable partition: exact reverse-mode
//! gradients with frozen tensors treated as constants, AdamW with decoupled
//! weight decay, a linear-warmup cosine schedule, and global-norm clipping.
//!
//! The backward pass is written out layer by layer against the
//! [`ForwardCache`] rather than through a tape; finite differences pin it
//! down in the tests and in the acceptance suite.

use std::time::Instant;

use crate::backbone::{forward_full, EncoderState, ForwardCache, ParamKind};
use crate::bench::{Dataset, MetricsRow, RunMeta, Split};
use crate::numkernel::{gelu_prime, softmax_rows, Mat, Rng};
use crate::{Error, Result};

/// Rng stream tag for the epoch shuffles (combined with the epoch index).
pub const STREAM_SHUFFLE_BASE: u64 = 0x1000;

/// Optimizer recipe. Defaults follow the shared transfer protocol: AdamW
/// at base lr 1e-3 with weight decay 0.05, 5 warmup epochs, cosine decay,
/// gradient clipping at 1.0. Twenty epochs is the desk-scale default; full
/// runs use 50.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            weight_decay: 0.05,
            epochs: 20,
            warmup_epochs: 5,
            clip_norm: 1.0,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::invalid(format!(
                "warmup_epochs ({}) must be < epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("base_lr and clip_norm must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Per-tensor gradients aligned with the encoder's tensor registry. Frozen
/// tensors have no slot: gradients for them are never produced.
#[derive(Debug, Clone)]
pub struct Grads {
    pub slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn zeros_like(state: &EncoderState) -> Self {
        let slots = state
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if state.frozen[i] {
                    None
                } else {
                    Some(Mat::zeros(t.rows(), t.cols()))
                }
            })
            .collect();
        Grads { slots }
    }

    fn wants(&self, idx: usize) -> bool {
        self.slots[idx].is_some()
    }

    fn add(&mut self, idx: usize, m: &Mat) {
        if let Some(slot) = self.slots[idx].as_mut() {
            for (a, b) in slot.data_mut().iter_mut().zip(m.data()) {
                *a += b;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &Grads, s: f64) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += s * y;
                }
            }
        }
    }

    pub fn scale_all(&mut self, s: f64) {
        for slot in self.slots.iter_mut().flatten() {
            for v in slot.data_mut().iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|m| m.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Numerically stable `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Mat, label: usize) -> Result<f64> {
    let c = logits.cols();
    if logits.rows() != 1 {
        return Err(Error::invalid("cross_entropy expects a 1 x C logit row"));
    }
    if label >= c {
        return Err(Error::invalid(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    if !logits.all_finite() {
        return Err(Error::invalid("cross_entropy: non-finite logits"));
    }
    let row = logits.row(0);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - row[label])
}

/// Exact gradients of the single-example loss with respect to every
/// trainable tensor. The cache must come from a forward pass on the exact
/// same parameter revision.
pub fn backward(state: &EncoderState, cache: &ForwardCache, label: usize) -> Result<Grads> {
    if cache.revision != state.revision {
        return Err(Error::StaleCache {
            cache_revision: cache.revision,
            state_revision: state.revision,
        });
    }
    let cfg = &state.cfg;
    if label >= cfg.classes {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            cfg.classes
        )));
    }
    let n = cfg.n_tokens;
    let d = cfg.d;
    let mut grads = Grads::zeros_like(state);

    // Loss -> logits: softmax minus one-hot.
    let mut dlogits = softmax_rows(&cache.logits);
    {
        let v = dlogits.get(0, label) - 1.0;
        dlogits.set(0, label, v);
    }

    // Head.
    if grads.wants(state.idx_head_w()) {
        let g = dlogits.transpose().matmul(&cache.cls_out)?;
        grads.add(state.idx_head_w(), &g);
    }
    if grads.wants(state.idx_head_b()) {
        grads.add(state.idx_head_b(), &dlogits.transpose());
    }
    let dcls = dlogits.matmul(&state.head_w)?; // 1 x d

    // Only the CLS row of the final tokens feeds the head.
    let mut dh = Mat::zeros(n, d);
    dh.row_mut(0).copy_from_slice(dcls.row(0));

    for bi in (0..cfg.l_blocks).rev() {
        dh = block_backward(state, bi, &cache.blocks[bi], dh, &mut grads)?;
    }

    // Embedding: dh is now the gradient at tokens0 = tokens + pos.
    grads.add(3, &dh); // pos
    let dcls_tok = Mat::from_vec(1, d, dh.row(0).to_vec())?;
    grads.add(2, &dcls_tok); // cls
    let patch_dim = state.patch_dim();
    if grads.wants(0) || grads.wants(1) {
        let mut patches = Mat::zeros(n - 1, patch_dim);
        for t in 1..n {
            patches
                .row_mut(t - 1)
                .copy_from_slice(&cache.input.row(0)[(t - 1) * patch_dim..t * patch_dim]);
        }
        let mut dtok = Mat::zeros(n - 1, d);
        for t in 1..n {
            dtok.row_mut(t - 1).copy_from_slice(dh.row(t));
        }
        if grads.wants(0) {
            let g = dtok.transpose().matmul(&patches)?; // d x patch_dim
            grads.add(0, &g);
        }
        if grads.wants(1) {
            grads.add(1, &column_sums(&dtok));
        }
    }
    Ok(grads)
}

/// Sum over rows, returned as a column vector (`cols x 1`).
fn column_sums(m: &Mat) -> Mat {
    let mut out = Mat::zeros(m.cols(), 1);
    for r in 0..m.rows() {
        for (c, &v) in m.row(r).iter().enumerate() {
            let acc = out.get(c, 0) + v;
            out.set(c, 0, acc);
        }
    }
    out
}

/// dL/dx for `y = gamma .* xhat + beta` given dL/dy, per row.
fn layernorm_backward(
    dy: &Mat,
    xhat: &Mat,
    inv_std: &[f64],
    gamma: &Mat,
) -> (Mat, Mat, Mat) {
    let d = dy.cols();
    let mut dx = Mat::zeros(dy.rows(), d);
    let mut dgamma = Mat::zeros(1, d);
    let mut dbeta = Mat::zeros(1, d);
    for r in 0..dy.rows() {
        let dy_r = dy.row(r);
        let xh_r = xhat.row(r);
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for c in 0..d {
            let g = dy_r[c] * gamma.get(0, c);
            mean_g += g;
            mean_gx += g * xh_r[c];
        }
        mean_g /= d as f64;
        mean_gx /= d as f64;
        for c in 0..d {
            let g = dy_r[c] * gamma.get(0, c);
            dx.set(r, c, inv_std[r] * (g - mean_g - xh_r[c] * mean_gx));
            let dg = dgamma.get(0, c) + dy_r[c] * xh_r[c];
            dgamma.set(0, c, dg);
            let db = dbeta.get(0, c) + dy_r[c];
            dbeta.set(0, c, db);
        }
    }
    (dx, dgamma, dbeta)
}

/// dL/dscores for row-wise softmax `p`: `p .* (ds - rowsum(ds .* p))`.
fn softmax_backward_rows(probs: &Mat, dprobs: &Mat) -> Mat {
    let mut out = Mat::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = dprobs.row(r);
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for c in 0..probs.cols() {
            out.set(r, c, p[c] * (dp[c] - dot));
        }
    }
    out
}

fn block_backward(
    state: &EncoderState,
    block_idx: usize,
    tr: &crate::backbone::BlockTrace,
    dh_out: Mat,
    grads: &mut Grads,
) -> Result<Mat> {
    let cfg = &state.cfg;
    let blk = &state.blocks[block_idx];
    let heads = cfg.heads;
    let dh_width = cfg.d / heads;
    let scale = 1.0 / (dh_width as f64).sqrt();

    // Adapter residual: h_out = h3 + alpha * A(h3).
    let dh3 = match (state.adapter_at_block(block_idx), &tr.adapter) {
        (Some(slot), Some(atr)) => {
            let params = &state.adapters[slot].1;
            let d_aout = dh_out.scale(params.alpha);
            if grads.wants(state.idx_adapter(slot, 2)) {
                let g = d_aout.transpose().matmul(&atr.act)?; // d x r
                grads.add(state.idx_adapter(slot, 2), &g);
            }
            if grads.wants(state.idx_adapter(slot, 3)) {
                grads.add(state.idx_adapter(slot, 3), &column_sums(&d_aout));
            }
            let d_act = d_aout.matmul(&params.w_up)?; // n x r
            let d_z = match params.activation {
                crate::adapter::Activation::Gelu => {
                    let mut dz = d_act.clone();
                    for (v, z) in dz.data_mut().iter_mut().zip(atr.z.data()) {
                        *v *= gelu_prime(*z);
                    }
                    dz
                }
                crate::adapter::Activation::Linear => d_act,
            };
            if grads.wants(state.idx_adapter(slot, 0)) {
                let g = d_z.transpose().matmul(&tr.h3)?; // r x d
                grads.add(state.idx_adapter(slot, 0), &g);
            }
            if grads.wants(state.idx_adapter(slot, 1)) {
                grads.add(state.idx_adapter(slot, 1), &column_sums(&d_z));
            }
            dh_out.add(&d_z.matmul(&params.w_down)?)?
        }
        _ => dh_out,
    };

    // MLP residual: h3 = h2 + fc2(gelu(fc1(ln2(h2)))).
    let d_m2 = &dh3;
    if grads.wants(state.idx_block(block_idx, 14)) {
        let g = d_m2.transpose().matmul(&tr.g1)?;
        grads.add(state.idx_block(block_idx, 14), &g);
    }
    if grads.wants(state.idx_block(block_idx, 15)) {
        grads.add(state.idx_block(block_idx, 15), &column_sums(d_m2));
    }
    let d_g1 = d_m2.matmul(&blk.fc2_w)?;
    let mut d_m1 = d_g1;
    for (v, z) in d_m1.data_mut().iter_mut().zip(tr.m1.data()) {
        *v *= gelu_prime(*z);
    }
    if grads.wants(state.idx_block(block_idx, 12)) {
        let g = d_m1.transpose().matmul(&tr.a2)?;
        grads.add(state.idx_block(block_idx, 12), &g);
    }
    if grads.wants(state.idx_block(block_idx, 13)) {
        grads.add(state.idx_block(block_idx, 13), &column_sums(&d_m1));
    }
    let d_a2 = d_m1.matmul(&blk.fc1_w)?;
    let (d_h2_ln, dgamma2, dbeta2) =
        layernorm_backward(&d_a2, &tr.xhat2, &tr.inv_std2, &blk.ln2_gamma);
    grads.add(state.idx_block(block_idx, 10), &dgamma2);
    grads.add(state.idx_block(block_idx, 11), &dbeta2);
    let d_h2 = dh3.add(&d_h2_ln)?;

    // Attention residual: h2 = x0 + wo(ctx).
    let d_o = &d_h2;
    if grads.wants(state.idx_block(block_idx, 8)) {
        let g = d_o.transpose().matmul(&tr.ctx)?;
        grads.add(state.idx_block(block_idx, 8), &g);
    }
    if grads.wants(state.idx_block(block_idx, 9)) {
        grads.add(state.idx_block(block_idx, 9), &column_sums(d_o));
    }
    let d_ctx = d_o.matmul(&blk.wo)?;

    let n = cfg.n_tokens;
    let mut d_q = Mat::zeros(n, cfg.d);
    let mut d_k = Mat::zeros(n, cfg.d);
    let mut d_v = Mat::zeros(n, cfg.d);
    for head in 0..heads {
        let off = head * dh_width;
        let d_ctx_h = d_ctx.col_slice(off, dh_width);
        let kh = tr.k.col_slice(off, dh_width);
        let qh = tr.q.col_slice(off, dh_width);
        let vh = tr.v.col_slice(off, dh_width);
        let probs = &tr.attn[head];
        let d_probs = d_ctx_h.matmul(&vh.transpose())?;
        let d_vh = probs.transpose().matmul(&d_ctx_h)?;
        let d_scores = softmax_backward_rows(probs, &d_probs);
        let d_qh = d_scores.matmul(&kh)?.scale(scale);
        let d_kh = d_scores.transpose().matmul(&qh)?.scale(scale);
        d_q.set_col_slice(off, &d_qh);
        d_k.set_col_slice(off, &d_kh);
        d_v.set_col_slice(off, &d_vh);
    }

    for (dmat, w_off, b_off) in [(&d_q, 2usize, 3usize), (&d_k, 4, 5), (&d_v, 6, 7)] {
        if grads.wants(state.idx_block(block_idx, w_off)) {
            let g = dmat.transpose().matmul(&tr.a1)?;
            grads.add(state.idx_block(block_idx, w_off), &g);
        }
        if grads.wants(state.idx_block(block_idx, b_off)) {
            grads.add(state.idx_block(block_idx, b_off), &column_sums(dmat));
        }
    }
    let mut d_a1 = d_q.matmul(&blk.wq)?;
    d_a1 = d_a1.add(&d_k.matmul(&blk.wk)?)?;
    d_a1 = d_a1.add(&d_v.matmul(&blk.wv)?)?;

    let (d_x0_ln, dgamma1, dbeta1) =
        layernorm_backward(&d_a1, &tr.xhat1, &tr.inv_std1, &blk.ln1_gamma);
    grads.add(state.idx_block(block_idx, 0), &dgamma1);
    grads.add(state.idx_block(block_idx, 1), &dbeta1);
    d_h2.add(&d_x0_ln)
}

/// Learning rate at an epoch: linear warmup to `base_lr` over
/// `warmup_epochs`, then cosine decay to zero over the remaining epochs.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} out of range 0..{}",
            cfg.epochs
        )));
    }
    let w = cfg.warmup_epochs;
    if epoch < w {
        return Ok(cfg.base_lr * (epoch + 1) as f64 / w as f64);
    }
    let progress = (epoch - w) as f64 / (cfg.epochs - w) as f64;
    Ok(cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. The trigger carries a 1e-12 relative tolerance so
/// that re-clipping an already clipped set is a bitwise no-op.
pub fn clip_global(grads: &mut Grads, max_norm: f64) {
    assert!(max_norm > 0.0);
    let norm = grads.global_norm();
    if norm > max_norm * (1.0 + 1e-12) {
        grads.scale_all(max_norm / norm);
    }
}

/// AdamW moments for every trainable tensor plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptState {
    pub t: u64,
    pub m: Vec<Option<Mat>>,
    pub v: Vec<Option<Mat>>,
    kinds: Vec<ParamKind>,
}

impl OptState {
    pub fn new(state: &EncoderState) -> Self {
        let template = Grads::zeros_like(state);
        OptState {
            t: 0,
            m: template.slots.clone(),
            v: template.slots,
            kinds: state.tensor_specs().iter().map(|s| s.kind).collect(),
        }
    }
}

/// One AdamW step with decoupled weight decay over the trainable tensors.
/// Decay is applied to plain weights only, never to biases or LayerNorm
/// affine parameters; frozen tensors are untouched.
pub fn adamw_step(
    state: &mut EncoderState,
    opt: &mut OptState,
    grads: &Grads,
    lr: f64,
    cfg: &TrainConfig,
) {
    opt.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(opt.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(opt.t as i32);
    let frozen = state.frozen.clone();
    let mut tensors = state.tensors_mut();
    for (idx, tensor) in tensors.iter_mut().enumerate() {
        if frozen[idx] {
            continue;
        }
        let Some(g) = grads.slots[idx].as_ref() else {
            continue;
        };
        let m = opt.m[idx].as_mut().expect("trainable moment");
        let v = opt.v[idx].as_mut().expect("trainable moment");
        let decay = if opt.kinds[idx] == ParamKind::Weight {
            cfg.weight_decay
        } else {
            0.0
        };
        for i in 0..tensor.len() {
            let gi = g.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let theta = tensor.data()[i];
            tensor.data_mut()[i] =
                theta - lr * m_hat / (v_hat.sqrt() + cfg.adam_eps) - lr * decay * theta;
        }
    }
    drop(tensors);
    state.revision += 1;
}

/// Mean loss and top-1 accuracy (percent) over one split.
pub fn evaluate(state: &EncoderState, data: &Dataset, split: Split) -> Result<(f64, f64)> {
    let idxs = data.indices(split);
    if idxs.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for &i in &idxs {
        let x = Mat::from_vec(1, data.input_dim(), data.inputs[i].clone())?;
        let cache = forward_full(state, &x)?;
        loss_sum += cross_entropy(&cache.logits, data.labels[i])?;
        let row = cache.logits.row(0);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == data.labels[i] {
            correct += 1;
        }
    }
    let n = idxs.len() as f64;
    Ok((loss_sum / n, 100.0 * correct as f64 / n))
}

/// Mean gradient (and mean loss) over a batch of examples.
pub fn batch_grads(
    state: &EncoderState,
    data: &Dataset,
    batch: &[usize],
) -> Result<(Grads, f64)> {
    let mut acc = Grads::zeros_like(state);
    let mut loss_sum = 0.0;
    for &i in batch {
        let x = Mat::from_vec(1, data.input_dim(), data.inputs[i].clone())?;
        let cache = forward_full(state, &x)?;
        loss_sum += cross_entropy(&cache.logits, data.labels[i])?;
        let g = backward(state, &cache, data.labels[i])?;
        acc.add_scaled(&g, 1.0);
    }
    let scale = 1.0 / batch.len() as f64;
    acc.scale_all(scale);
    Ok((acc, loss_sum * scale))
}

/// Runs the full optimization protocol on the dataset's train split,
/// evaluating train and val splits after every epoch. Deterministic for a
/// fixed seed: the epoch-`e` shuffle is derived from `(seed, e)` alone.
pub fn train(
    mut state: EncoderState,
    data: &Dataset,
    cfg: &TrainConfig,
    meta: &RunMeta,
) -> Result<(EncoderState, Vec<MetricsRow>)> {
    cfg.validate()?;
    data.validate()?;
    if data.labels.iter().any(|&l| l >= state.cfg.classes) {
        return Err(Error::invalid("dataset label out of range for model head"));
    }
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }

    let mut rows = Vec::new();
    let mut opt = OptState::new(&state);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(cfg, epoch)?;
        let mut order = train_idx.clone();
        Rng::from_seed_stream(cfg.seed, STREAM_SHUFFLE_BASE + epoch as u64).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let (mut grads, _) = batch_grads(&state, data, batch)?;
            clip_global(&mut grads, cfg.clip_norm);
            adamw_step(&mut state, &mut opt, &grads, lr, cfg);
        }
        let wall_ms = started.elapsed().as_millis() as u64;
        let (train_loss, train_top1) = evaluate(&state, data, Split::Train)?;
        rows.push(meta.row(data, epoch, Split::Train, train_loss, train_top1, wall_ms));
        if !data.indices(Split::Val).is_empty() {
            let (val_loss, val_top1) = evaluate(&state, data, Split::Val)?;
            rows.push(meta.row(data, epoch, Split::Val, val_loss, val_top1, wall_ms));
        }
    }
    Ok((state, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::InitScheme;
    use crate::backbone::{EncoderState, ModelConfig, Regime};

    fn tiny_cfg(regime: Regime) -> ModelConfig {
        ModelConfig {
            d: 8,
            l_blocks: 2,
            heads: 2,
            n_tokens: 5,
            mlp_ratio: 2.0,
            classes: 3,
            rank: 2,
            alpha: 1.0,
            every_k: 1,
            init: InitScheme::Zero,
            regime,
        }
    }

    fn randomized_state(regime: Regime, seed: u64) -> EncoderState {
        let mut rng = Rng::seeded(seed);
        let mut state = EncoderState::init(&tiny_cfg(regime), 16, &mut rng).unwrap();
        state.prepare_downstream(&mut rng).unwrap();
        // Give head and adapters generic values so no gradient is trivially
        // zero by structure.
        for t in state.tensors_mut() {
            if t.max_abs() == 0.0 {
                let fresh = Mat::gaussian(t.rows(), t.cols(), 0.0, 0.05, &mut rng);
                *t = fresh;
            }
        }
        state.revision += 1;
        state
    }

    #[test]
    fn cross_entropy_known_values() {
        let logits = Mat::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        assert!((cross_entropy(&logits, 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let logits = Mat::from_vec(1, 2, vec![10.0, 0.0]).unwrap();
        let want = (1.0 + (-10.0f64).exp()).ln();
        assert!((cross_entropy(&logits, 0).unwrap() - want).abs() < 1e-15);

        assert!(cross_entropy(&logits, 2).is_err());
    }

    #[test]
    fn cross_entropy_shift_invariance() {
        let logits = Mat::from_vec(1, 4, vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let shifted = logits.map(|v| v + 123.456);
        let a = cross_entropy(&logits, 2).unwrap();
        let b = cross_entropy(&shifted, 2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_boundaries() {
        let cfg = TrainConfig {
            epochs: 25,
            warmup_epochs: 5,
            base_lr: 1e-3,
            ..TrainConfig::default()
        };
        // End of warmup hits the cosine peak exactly.
        assert_eq!(lr_at(&cfg, 5).unwrap(), 1e-3);
        // Warmup is linear in (epoch + 1).
        assert!((lr_at(&cfg, 0).unwrap() - 2e-4).abs() < 1e-18);
        // Cosine midpoint: epoch 15 -> progress 1/2 -> half the base lr.
        assert!((lr_at(&cfg, 15).unwrap() - 5e-4).abs() < 1e-12);
        // Final epoch is near zero.
        let last = lr_at(&cfg, 24).unwrap();
        assert!(last > 0.0 && last < 1e-3 * 0.01, "last lr {last}");
        assert!(lr_at(&cfg, 25).is_err());
    }

    #[test]
    fn clip_scales_to_unit_norm() {
        let mut state = randomized_state(Regime::FullFineTune, 1);
        state.frozen = vec![true; state.num_tensors()];
        state.frozen[state.idx_head_b()] = false;
        let mut grads = Grads::zeros_like(&state);
        let idx = state.idx_head_b();
        grads.slots[idx] = Some(Mat::from_vec(3, 1, vec![3.0, 4.0, 0.0]).unwrap());
        clip_global(&mut grads, 1.0);
        let g = grads.slots[idx].as_ref().unwrap();
        assert!((g.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((g.get(1, 0) - 0.8).abs() < 1e-12);
        assert!(grads.global_norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn clip_below_threshold_is_identity_and_idempotent() {
        let mut state = randomized_state(Regime::FullFineTune, 2);
        state.frozen = vec![true; state.num_tensors()];
        state.frozen[state.idx_head_b()] = false;
        let idx = state.idx_head_b();

        let mut small = Grads::zeros_like(&state);
        small.slots[idx] = Some(Mat::from_vec(3, 1, vec![0.1, 0.2, 0.0]).unwrap());
        let before = small.slots[idx].clone().unwrap();
        clip_global(&mut small, 1.0);
        for (a, b) in small.slots[idx].as_ref().unwrap().data().iter().zip(before.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let mut big = Grads::zeros_like(&state);
        big.slots[idx] = Some(Mat::from_vec(3, 1, vec![30.0, -40.0, 5.0]).unwrap());
        clip_global(&mut big, 1.0);
        let once = big.slots[idx].clone().unwrap();
        clip_global(&mut big, 1.0);
        for (a, b) in big.slots[idx].as_ref().unwrap().data().iter().zip(once.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adamw_single_step_closed_form() {
        let mut state = randomized_state(Regime::FullFineTune, 3);
        // theta = 1, g = 1, lr = 1e-3, wd = 0.05 on a plain weight.
        let idx = state.idx_head_w();
        let shape = (state.head_w.rows(), state.head_w.cols());
        state.head_w = Mat::from_vec(shape.0, shape.1, vec![1.0; shape.0 * shape.1]).unwrap();
        let cfg = TrainConfig::default();
        let mut opt = OptState::new(&state);
        let mut grads = Grads::zeros_like(&state);
        for slot in grads.slots.iter_mut().flatten() {
            for v in slot.data_mut().iter_mut() {
                *v = 0.0;
            }
        }
        grads.slots[idx] = Some(Mat::from_vec(
            shape.0,
            shape.1,
            vec![1.0; shape.0 * shape.1],
        )
        .unwrap());
        adamw_step(&mut state, &mut opt, &grads, 1e-3, &cfg);
        let want = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8)) - 1e-3 * 0.05 * 1.0;
        assert!((state.head_w.get(0, 0) - want).abs() < 1e-12);
        assert!((want - 0.998_950).abs() < 1e-6);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut state = randomized_state(Regime::FullFineTune, 4);
        let before = state.head_w.clone();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = OptState::new(&state);
        let grads = Grads::zeros_like(&state); // all-zero gradients
        adamw_step(&mut state, &mut opt, &grads, 1e-3, &cfg);
        for (a, b) in state.head_w.data().iter().zip(before.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adamw_leaves_frozen_tensors_untouched() {
        let mut state = randomized_state(Regime::AdapterTune, 5);
        let frozen_before = state.blocks[0].wq.clone();
        let cfg = TrainConfig::default();
        let mut opt = OptState::new(&state);
        let mut grads = Grads::zeros_like(&state);
        for slot in grads.slots.iter_mut().flatten() {
            let fresh = Mat::gaussian(slot.rows(), slot.cols(), 0.0, 1.0, &mut Rng::seeded(6));
            *slot = fresh;
        }
        adamw_step(&mut state, &mut opt, &grads, 1e-3, &cfg);
        for (a, b) in state.blocks[0].wq.data().iter().zip(frozen_before.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    fn loss_of(state: &EncoderState, x: &Mat, label: usize) -> f64 {
        let cache = forward_full(state, x).unwrap();
        cross_entropy(&cache.logits, label).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences_on_tiny_model() {
        let state = randomized_state(Regime::FullFineTune, 7);
        let mut rng = Rng::seeded(99);
        let x = Mat::gaussian(1, 16, 0.0, 1.0, &mut rng);
        let label = 1usize;
        let cache = forward_full(&state, &x).unwrap();
        let grads = backward(&state, &cache, label).unwrap();

        let h = 1e-5;
        let specs = state.tensor_specs();
        for idx in 0..state.num_tensors() {
            let analytic = grads.slots[idx].as_ref().unwrap();
            // Probe a handful of entries per tensor to keep the unit test
            // quick; the acceptance suite sweeps every entry.
            let len = analytic.len();
            let probe: Vec<usize> = if len <= 4 {
                (0..len).collect()
            } else {
                vec![0, len / 3, len / 2, len - 1]
            };
            for &e in &probe {
                let mut plus = state.clone();
                plus.tensors_mut()[idx].data_mut()[e] += h;
                let mut minus = state.clone();
                minus.tensors_mut()[idx].data_mut()[e] -= h;
                let fd = (loss_of(&plus, &x, label) - loss_of(&minus, &x, label)) / (2.0 * h);
                let a = analytic.data()[e];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (a - fd).abs() / denom < 1e-4,
                    "tensor {} entry {e}: analytic {a} vs fd {fd}",
                    specs[idx].name
                );
            }
        }
    }

    #[test]
    fn zero_init_gradient_structure() {
        // With W_up = 0 the chain rule kills the down-projection gradients
        // exactly, while the up-projection still receives signal.
        let mut rng = Rng::seeded(8);
        let mut state = EncoderState::init(&tiny_cfg(Regime::AdapterTune), 16, &mut rng).unwrap();
        state.prepare_downstream(&mut rng).unwrap();
        // Nonzero head so the loss depends on features.
        state.head_w = Mat::gaussian(3, 8, 0.0, 0.5, &mut rng);
        state.revision += 1;
        let x = Mat::gaussian(1, 16, 0.0, 1.0, &mut rng);
        let cache = forward_full(&state, &x).unwrap();
        let grads = backward(&state, &cache, 0).unwrap();
        for slot in 0..state.adapters.len() {
            let g_wdown = grads.slots[state.idx_adapter(slot, 0)].as_ref().unwrap();
            let g_bdown = grads.slots[state.idx_adapter(slot, 1)].as_ref().unwrap();
            let g_wup = grads.slots[state.idx_adapter(slot, 2)].as_ref().unwrap();
            assert_eq!(g_wdown.max_abs(), 0.0, "adapter {slot} w_down");
            assert_eq!(g_bdown.max_abs(), 0.0, "adapter {slot} b_down");
            assert!(g_wup.max_abs() > 0.0, "adapter {slot} w_up should get signal");
        }
    }

    #[test]
    fn frozen_tensors_get_no_gradient_slots() {
        let state = randomized_state(Regime::AdapterTune, 9);
        let mut rng = Rng::seeded(10);
        let x = Mat::gaussian(1, 16, 0.0, 1.0, &mut rng);
        let cache = forward_full(&state, &x).unwrap();
        let grads = backward(&state, &cache, 2).unwrap();
        for (idx, slot) in grads.slots.iter().enumerate() {
            assert_eq!(slot.is_some(), !state.frozen[idx]);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut state = randomized_state(Regime::FullFineTune, 11);
        let mut rng = Rng::seeded(12);
        let x = Mat::gaussian(1, 16, 0.0, 1.0, &mut rng);
        let cache = forward_full(&state, &x).unwrap();
        state.revision += 1;
        assert!(matches!(
            backward(&state, &cache, 0),
            Err(crate::Error::StaleCache { .. })
        ));
    }

    #[test]
    fn batch_gradient_is_mean_of_example_gradients() {
        let state = randomized_state(Regime::AdapterTune, 13);
        let mut rng = Rng::seeded(14);
        let data = crate::bench::Dataset::from_parts(
            "batch-test".into(),
            (0..6)
                .map(|_| Mat::gaussian(1, 16, 0.0, 1.0, &mut rng).data().to_vec())
                .collect(),
            vec![0, 1, 2, 0, 1, 2],
            3,
        )
        .unwrap();
        let batch: Vec<usize> = (0..6).collect();
        let (mean_grads, _) = batch_grads(&state, &data, &batch).unwrap();

        let mut manual = Grads::zeros_like(&state);
        for &i in &batch {
            let x = Mat::from_vec(1, 16, data.inputs[i].clone()).unwrap();
            let cache = forward_full(&state, &x).unwrap();
            let g = backward(&state, &cache, data.labels[i]).unwrap();
            manual.add_scaled(&g, 1.0 / 6.0);
        }
        for (a, b) in mean_grads.slots.iter().zip(&manual.slots) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
