//! Dense real linear algebra and scalar nonlinearities.
//!
//! Everything here is plain row-major `f64` with fixed summation orders, so
//! results are bitwise reproducible across runs and platforms. Matrices are
//! deliberately small (the crate targets hidden dimensions up to ~256); no
//! attempt is made at blocking or SIMD intrinsics beyond what the compiler
//! finds on its own.

mod mat;
mod rng;
mod svd;

pub use mat::Mat;
pub use rng::Rng;
pub use svd::{svd, SvdResult};

/// Exact (erf-based) GELU: `0.5 * x * (1 + erf(x / sqrt(2)))`.
///
/// The tanh approximation is not used anywhere in this crate; gradient
/// checks rely on the derivative of this exact form.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Derivative of [`gelu`]: `Phi(x) + x * phi(x)` with the standard normal
/// CDF `Phi` and density `phi`.
pub fn gelu_prime(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

/// Row-wise softmax with max-subtraction for overflow safety.
pub fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Per-row layer normalization followed by an affine map.
///
/// Each row of `x` is shifted to zero mean and scaled to unit variance
/// (biased variance estimate, stabilized by `eps`), then multiplied by
/// `gamma` and shifted by `beta` elementwise. `gamma` and `beta` must hold
/// exactly `x.cols()` entries.
pub fn layernorm(x: &Mat, gamma: &Mat, beta: &Mat, eps: f64) -> crate::Result<Mat> {
    let (y, _, _) = layernorm_cached(x, gamma, beta, eps)?;
    Ok(y)
}

/// [`layernorm`] that also returns the normalized rows and the per-row
/// `1/sqrt(var + eps)` needed by the backward pass.
pub fn layernorm_cached(
    x: &Mat,
    gamma: &Mat,
    beta: &Mat,
    eps: f64,
) -> crate::Result<(Mat, Mat, Vec<f64>)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(crate::Error::invalid(format!(
            "layernorm: gamma/beta length {}/{} does not match width {}",
            gamma.len(),
            beta.len(),
            d
        )));
    }
    if eps <= 0.0 {
        return Err(crate::Error::invalid("layernorm: eps must be > 0"));
    }
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = xhat.row_mut(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    let mut y = xhat.clone();
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        for (c, v) in row.iter_mut().enumerate() {
            *v = *v * gamma.data()[c] + beta.data()[c];
        }
    }
    Ok((y, xhat, inv_std))
}
