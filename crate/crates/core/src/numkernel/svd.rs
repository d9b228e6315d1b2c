//! Singular value decomposition via one-sided (Hestenes) Jacobi rotations.
//!
//! Column pairs of the working matrix are rotated until every pair is
//! orthogonal to near machine precision, which keeps the off-diagonal
//! Frobenius mass of `A^T A` far below the documented `1e-12 * ||A||_F^2`
//! stopping bound. Robust and simple at the dimensions this crate targets
//! (min(m, n) <= 256); not meant for large matrices.

use crate::numkernel::Mat;
use crate::{Error, Result};

/// Hard cap on Jacobi sweeps before reporting non-convergence.
const MAX_SWEEPS: usize = 100;
/// A pair is considered orthogonal when |u_p . u_q| <= PAIR_TOL * |u_p||u_q|.
const PAIR_TOL: f64 = 1e-14;
/// Singular values below DEGENERATE_TOL * sigma_max get a basis-completed
/// left vector instead of a normalized (noise-dominated) column.
const DEGENERATE_TOL: f64 = 1e-12;

/// Thin SVD `a = u * diag(s) * vt` with `k = min(rows, cols)`.
///
/// `s` is non-increasing and non-negative; the columns of `u` and the rows
/// of `vt` are orthonormal, including those paired with (numerically) zero
/// singular values.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Mat,
    pub s: Vec<f64>,
    pub vt: Mat,
}

impl SvdResult {
    /// Reassembles `u * diag(s) * vt`.
    pub fn reconstruct(&self) -> Mat {
        let k = self.s.len();
        let mut scaled = self.u.clone();
        for r in 0..scaled.rows() {
            for (c, sv) in self.s.iter().enumerate().take(k) {
                let v = scaled.get(r, c) * sv;
                scaled.set(r, c, v);
            }
        }
        scaled.matmul(&self.vt).expect("svd factor shapes")
    }
}

pub fn svd(a: &Mat) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::invalid("svd: empty matrix"));
    }
    if !a.all_finite() {
        return Err(Error::invalid("svd: input contains NaN or Inf"));
    }
    if a.rows() >= a.cols() {
        svd_tall(a)
    } else {
        // A = (A^T)^T: decompose the transpose and swap the factor roles.
        let r = svd_tall(&a.transpose())?;
        Ok(SvdResult {
            u: r.vt.transpose(),
            s: r.s,
            vt: r.u.transpose(),
        })
    }
}

/// One-sided Jacobi for rows >= cols. Works on `A^T` row-wise so each column
/// of the implicit `U` is contiguous.
fn svd_tall(a: &Mat) -> Result<SvdResult> {
    let m = a.rows();
    let n = a.cols();
    let mut ut = a.transpose(); // n rows of length m: row j is column j of U
    let mut v = Mat::identity(n); // row j is column j of V

    let fro_sq: f64 = a.data().iter().map(|x| x * x).sum();
    let mut off_mass = 0.0;
    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        let mut off_sq = 0.0;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let up = ut.row(p);
                    let uq = ut.row(q);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for (&x, &y) in up.iter().zip(uq) {
                        al += x * x;
                        be += y * y;
                        ga += x * y;
                    }
                    (al, be, ga)
                };
                off_sq += gamma * gamma;
                if gamma * gamma <= PAIR_TOL * PAIR_TOL * alpha * beta {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut ut, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        off_mass = off_sq.sqrt();
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged && off_mass > 1e-12 * fro_sq {
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            residual: off_mass,
        });
    }

    // Column norms are the singular values; stable sort keeps ties ordered.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| ut.row(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let sigma_max = norms[order[0]];
    let mut s = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > DEGENERATE_TOL * sigma_max {
            u_cols.push(ut.row(j).iter().map(|x| x / sigma).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            degenerate.push(slot);
        }
    }
    complete_basis(&mut u_cols, &degenerate, m);

    let mut u = Mat::zeros(m, n);
    for (c, col) in u_cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            u.set(r, c, x);
        }
    }
    let mut vt = Mat::zeros(n, n);
    for (slot, &j) in order.iter().enumerate() {
        vt.row_mut(slot).copy_from_slice(v.row(j));
    }
    Ok(SvdResult { u, s, vt })
}

fn rotate_rows(m: &mut Mat, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let (pr, qr) = {
        let data = m.data_mut();
        let (lo, hi) = data.split_at_mut(q * cols);
        (&mut lo[p * cols..(p + 1) * cols], &mut hi[..cols])
    };
    for (x, y) in pr.iter_mut().zip(qr.iter_mut()) {
        let xp = c * *x - s * *y;
        let yq = s * *x + c * *y;
        *x = xp;
        *y = yq;
    }
}

/// Replaces the listed (zero) columns with unit vectors orthogonal to every
/// other column, via doubly-applied Gram-Schmidt starting from canonical
/// basis vectors.
fn complete_basis(cols: &mut [Vec<f64>], degenerate: &[usize], m: usize) {
    for &slot in degenerate {
        let mut chosen = None;
        for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            // Columns still pending completion are all-zero and contribute
            // nothing to the projections, so every column can be visited.
            for _ in 0..2 {
                for col in cols.iter() {
                    let dot: f64 = cand.iter().zip(col).map(|(a, b)| a * b).sum();
                    for (c, &u) in cand.iter_mut().zip(col) {
                        *c -= dot * u;
                    }
                }
            }
            let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for c in cand.iter_mut() {
                    *c /= norm;
                }
                chosen = Some(cand);
                break;
            }
        }
        cols[slot] = chosen.expect("m >= n guarantees a completion exists");
    }
}
