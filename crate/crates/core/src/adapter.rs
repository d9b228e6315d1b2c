//! The residual low-rank bottleneck adapter.
//!
//! An adapter maps token features `h` (one row per token, width `d`) through
//! a rank-`r` bottleneck:
//!
//! ```text
//! A(h) = gelu(h W_down^T + b_down^T) W_up^T + b_up^T
//! ```
//!
//! and is inserted residually as `h + alpha * A(h)`. With the up-projection
//! and its bias zero-initialized, `A(h)` is exactly the zero matrix and the
//! residual sum reproduces `h` bit for bit: the adapted network starts as
//! the frozen one. That identity is structural; there is no special-cased
//! shortcut path.

use crate::numkernel::{gelu, Mat, Rng};
use crate::{Error, Result};

/// Standard deviation for the down-projection initialization.
pub const DOWN_INIT_STD: f64 = 0.02;

/// How the bottleneck nonlinearity is evaluated. `Linear` exists for the
/// rank-capacity analysis, where the constructive adapter is a first-order
/// (linear) object; trained adapters always use `Gelu`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Linear,
}

/// Initialization scheme for the up-projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// `W_up = 0`, `b_up = 0`: exact identity at initialization.
    Zero,
    /// `W_up ~ N(0, sigma0^2)`, `b_up = 0`.
    SmallRandom { sigma0: f64 },
}

impl InitScheme {
    pub fn validate(&self) -> Result<()> {
        if let InitScheme::SmallRandom { sigma0 } = self {
            if !(*sigma0 > 0.0) {
                return Err(Error::invalid("small_random init requires sigma0 > 0"));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for InitScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InitScheme::Zero => write!(f, "zero"),
            InitScheme::SmallRandom { sigma0 } => write!(f, "small_random:{sigma0}"),
        }
    }
}

/// The four learnable tensors of one adapter plus its rank and scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub w_down: Mat, // r x d
    pub b_down: Mat, // r x 1
    pub w_up: Mat,   // d x r
    pub b_up: Mat,   // d x 1
    pub rank: usize,
    pub alpha: f64,
    pub activation: Activation,
}

impl AdapterParams {
    pub fn width(&self) -> usize {
        self.w_down.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        let r = self.rank;
        if r < 1 || r > d {
            return Err(Error::invalid(format!("rank {r} out of range 1..={d}")));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("alpha must be > 0"));
        }
        let shapes_ok = self.w_down.rows() == r
            && self.w_down.cols() == d
            && self.b_down.rows() == r
            && self.b_down.cols() == 1
            && self.w_up.rows() == d
            && self.w_up.cols() == r
            && self.b_up.rows() == d
            && self.b_up.cols() == 1;
        if !shapes_ok {
            return Err(Error::invalid("adapter tensor shapes inconsistent with (r, d)"));
        }
        Ok(())
    }
}

/// Pre-activation, post-activation, and output of one adapter application;
/// kept by the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct AdapterTrace {
    pub z: Mat,   // tokens x r, pre-activation
    pub act: Mat, // tokens x r, post-activation
    pub out: Mat, // tokens x d
}

/// Evaluates `A(h)` row-independently on `tokens x d` input.
pub fn adapter_forward(p: &AdapterParams, h: &Mat) -> Result<Mat> {
    Ok(adapter_forward_traced(p, h)?.out)
}

pub fn adapter_forward_traced(p: &AdapterParams, h: &Mat) -> Result<AdapterTrace> {
    if h.cols() != p.width() {
        return Err(Error::ShapeMismatch {
            op: "adapter_forward",
            left_rows: h.rows(),
            left_cols: h.cols(),
            right_rows: p.w_down.rows(),
            right_cols: p.w_down.cols(),
        });
    }
    let mut z = h.matmul(&p.w_down.transpose())?;
    for r in 0..z.rows() {
        for c in 0..z.cols() {
            let v = z.get(r, c) + p.b_down.get(c, 0);
            z.set(r, c, v);
        }
    }
    let act = match p.activation {
        Activation::Gelu => z.map(gelu),
        Activation::Linear => z.clone(),
    };
    let mut out = act.matmul(&p.w_up.transpose())?;
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            let v = out.get(r, c) + p.b_up.get(c, 0);
            out.set(r, c, v);
        }
    }
    Ok(AdapterTrace { z, act, out })
}

/// Residual insertion `h + alpha * A(h)`.
pub fn residual_apply(p: &AdapterParams, h: &Mat) -> Result<Mat> {
    let a = adapter_forward(p, h)?;
    h.add(&a.scale(p.alpha))
}

/// Builds an adapter for width `d` at rank `r`.
///
/// Under both schemes the down-projection is drawn from
/// `N(0, 0.02^2)` and both biases start at zero; the schemes differ only in
/// the up-projection (`Zero` vs `N(0, sigma0^2)`).
pub fn init_adapter(
    d: usize,
    r: usize,
    alpha: f64,
    scheme: InitScheme,
    rng: &mut Rng,
) -> Result<AdapterParams> {
    if r < 1 || r > d {
        return Err(Error::invalid(format!(
            "init_adapter: rank {r} out of range 1..={d}"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid("init_adapter: alpha must be > 0"));
    }
    scheme.validate()?;
    let w_down = Mat::gaussian(r, d, 0.0, DOWN_INIT_STD, rng);
    let w_up = match scheme {
        InitScheme::Zero => Mat::zeros(d, r),
        InitScheme::SmallRandom { sigma0 } => Mat::gaussian(d, r, 0.0, sigma0, rng),
    };
    Ok(AdapterParams {
        w_down,
        b_down: Mat::zeros(r, 1),
        w_up,
        b_up: Mat::zeros(d, 1),
        rank: r,
        alpha,
        activation: Activation::Gelu,
    })
}

/// Trainable parameters of a single adapter: `2rd + r + d`.
pub fn adapter_param_count(r: usize, d: usize) -> usize {
    2 * r * d + r + d
}

/// Trainable total for `floor(L/k)` adapters plus a `C x d` linear head
/// (head bias excluded; see [`total_trainable_count_actual`]).
pub fn total_trainable_count(
    l_blocks: usize,
    every_k: usize,
    r: usize,
    d: usize,
    classes: usize,
) -> usize {
    (l_blocks / every_k) * adapter_param_count(r, d) + classes * d
}

/// Like [`total_trainable_count`] but counting the head bias as well.
pub fn total_trainable_count_actual(
    l_blocks: usize,
    every_k: usize,
    r: usize,
    d: usize,
    classes: usize,
) -> usize {
    total_trainable_count(l_blocks, every_k, r, d, classes) + classes
}
