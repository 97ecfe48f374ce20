//! Thin SVD by one-sided (Hestenes) Jacobi rotations, plus singular-mass truncation.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 60;
/// A sweep whose largest rotation angle is below this ends the iteration.
pub const ANGLE_TOL: f64 = 1e-12;
/// Column pairs this close to orthogonal (relative) are not rotated.
const ORTHO_SKIP: f64 = 1e-15;

/// `M ≈ U · diag(S) · Vᵀ` with `U: m×k`, `V: n×k`, `S` non-increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let us = self.u.scale_cols(&self.s).expect("factor shapes");
        us.matmul_nt(&self.v).expect("factor shapes")
    }
}

/// Thin SVD with `k = min(rows, cols)`; zero singular values are retained and
/// their singular vectors are completed to an orthonormal set.
pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Parameter("svd of an empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::Numeric("svd input".into()));
    }
    if m.cols() > m.rows() {
        let t = svd_tall(&m.transpose())?;
        return Ok(SvdFactors {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    svd_tall(m)
}

fn svd_tall(m: &Matrix) -> Result<SvdFactors> {
    let (rows, n) = m.shape();
    // Row j of `g` is column j of the working matrix; row j of `vt` is column j of V.
    let mut g = m.transpose();
    let mut vt = Matrix::identity(n);

    let mut converged = false;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        let mut max_angle = 0.0f64;
        residual = 0.0;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let gp = g.row(p);
                    let gq = g.row(q);
                    (dot(gp, gp), dot(gq, gq), dot(gp, gq))
                };
                let scale = (alpha * beta).sqrt();
                if scale == 0.0 || gamma.abs() <= ORTHO_SKIP * scale {
                    continue;
                }
                residual = f64::max(residual, gamma.abs() / scale);
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = c * t;
                max_angle = max_angle.max(t.atan().abs());
                rotate_rows(&mut g, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        if max_angle < ANGLE_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = (0..n).map(|j| dot(g.row(j), g.row(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let s_max = norms[order[0]];
    let null_tol = s_max * (rows as f64) * f64::EPSILON;
    let mut u = Matrix::zeros(rows, n);
    let mut v = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sj = norms[j];
        s.push(sj);
        for i in 0..n {
            v[(i, k)] = vt[(j, i)];
        }
        if sj > null_tol && sj > 0.0 {
            for i in 0..rows {
                u[(i, k)] = g[(j, i)] / sj;
            }
        } else {
            deficient.push(k);
        }
    }
    complete_orthonormal(&mut u, &deficient);
    Ok(SvdFactors { u, s, v })
}

#[inline]
fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.data_mut();
    let (head, tail) = data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every other
/// column. Each one is the standard basis vector with the largest residual after
/// projecting out the filled columns; that residual is at least `sqrt(1/rows)`.
pub(crate) fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let (rows, cols) = u.shape();
    let mut filled: Vec<bool> = (0..cols).map(|j| !missing.contains(&j)).collect();
    for &k in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for candidate in 0..rows {
            let mut w = vec![0.0; rows];
            w[candidate] = 1.0;
            // Two passes of modified Gram-Schmidt.
            for _ in 0..2 {
                for j in (0..cols).filter(|&j| filled[j]) {
                    let proj: f64 = (0..rows).map(|i| u[(i, j)] * w[i]).sum();
                    for (i, wi) in w.iter_mut().enumerate() {
                        *wi -= proj * u[(i, j)];
                    }
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, w));
            }
        }
        let (norm, w) = best.expect("rows > 0");
        assert!(norm > 0.0, "more columns than rows in orthonormal completion");
        for (i, wi) in w.iter().enumerate() {
            u[(i, k)] = wi / norm;
        }
        filled[k] = true;
    }
}

/// Fraction `Σ_{i<k} s_i / Σ s_i` (1 when the spectrum is all zero).
pub fn retained_mass(s: &[f64], k: usize) -> f64 {
    let total: f64 = s.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    s[..k.min(s.len())].iter().sum::<f64>() / total
}

/// Smallest `k` whose cumulative singular-value fraction reaches `v`, capped by
/// `max_rank`. Returns 1 for an all-zero spectrum.
pub fn select_rank(s: &[f64], v: f64, max_rank: Option<usize>) -> Result<usize> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::Parameter(format!(
            "threshold must lie in (0, 1], got {v}"
        )));
    }
    if max_rank == Some(0) {
        return Err(Error::Parameter("max_rank must be positive".into()));
    }
    if s.is_empty() {
        return Err(Error::Parameter("empty singular spectrum".into()));
    }
    let total: f64 = s.iter().sum();
    let mut k = s.len();
    if total > 0.0 {
        let mut cum = 0.0;
        for (i, si) in s.iter().enumerate() {
            cum += si;
            if cum / total >= v {
                k = i + 1;
                break;
            }
        }
    } else {
        k = 1;
    }
    Ok(max_rank.map_or(k, |cap| k.min(cap)))
}

/// Keeps the leading components selected by [`select_rank`].
pub fn truncate(f: &SvdFactors, v: f64, max_rank: Option<usize>) -> Result<SvdFactors> {
    let k = select_rank(&f.s, v, max_rank)?;
    Ok(SvdFactors {
        u: f.u.leading_cols(k),
        s: f.s[..k].to_vec(),
        v: f.v.leading_cols(k),
    })
}

/// How the truncation threshold measures singular mass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassMeasure {
    /// Sum of singular values.
    #[default]
    Magnitude,
    /// Sum of squared singular values.
    Energy,
}

impl MassMeasure {
    pub fn weights(self, s: &[f64]) -> Vec<f64> {
        match self {
            MassMeasure::Magnitude => s.to_vec(),
            MassMeasure::Energy => s.iter().map(|x| x * x).collect(),
        }
    }
}
