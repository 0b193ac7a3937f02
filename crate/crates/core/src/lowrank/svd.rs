//! Thin SVD by one-sided (Hestenes) Jacobi orthogonalization.
//!
//! Columns of the (possibly transposed) input are rotated pairwise in a fixed
//! cyclic order until every pair is orthogonal to working precision. The
//! rotated column norms are the singular values and the accumulated rotations
//! form `V`.

use serde::{Deserialize, Serialize};

use super::matrix::{frobenius_norm, Matrix};
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 100;

/// Columns whose norm falls below this fraction of `‖W‖_F` are treated as
/// exact zeros: they are left out of rotations and their left singular
/// vectors are completed by Gram–Schmidt.
const ZERO_COLUMN_RTOL: f64 = 1e-14;

/// `W = u · diag(sigma) · vᵀ` with `k = min(d, p)` columns in `u` and `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
    /// Sweeps used by the Jacobi iteration.
    pub sweeps: usize,
}

impl SvdFactors {
    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.rows())
    }

    /// `sqrt(Σ σ_j²)`, i.e. the Frobenius norm of the source matrix.
    pub fn norm(&self) -> f64 {
        self.sigma.iter().map(|s| s * s).sum::<f64>().sqrt()
    }

    /// Number of singular values above `rtol · σ₁`.
    pub fn numerical_rank(&self, rtol: f64) -> usize {
        let top = self.sigma.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > rtol * top).count()
    }

    fn check_rank(&self, r: usize) -> Result<()> {
        if r == 0 || r > self.k() {
            return Err(Error::RankOutOfRange { rank: r, max: self.k() });
        }
        Ok(())
    }

    /// Leading `r` left singular vectors scaled by their singular values
    /// (`d x r`).
    pub fn scaled_left(&self, r: usize) -> Result<Matrix> {
        self.check_rank(r)?;
        Ok(Matrix::from_fn(self.u.rows(), r, |i, j| self.u[(i, j)] * self.sigma[j]))
    }

    /// Leading `r` right singular vectors as rows (`r x p`).
    pub fn right_rows(&self, r: usize) -> Result<Matrix> {
        self.check_rank(r)?;
        Ok(Matrix::from_fn(r, self.v.rows(), |i, j| self.v[(j, i)]))
    }
}

pub fn svd(w: &Matrix) -> Result<SvdFactors> {
    if !w.is_finite() {
        return Err(Error::InvalidMatrix("non-finite entry".into()));
    }
    let (d, p) = w.shape();
    if d >= p {
        Ok(finish(jacobi_tall(w), false))
    } else {
        // Wᵀ = U' Σ V'ᵀ, so W = V' Σ U'ᵀ.
        Ok(finish(jacobi_tall(&w.transpose()), true))
    }
}

/// Best rank-`r` approximation `U[:, :r] Σ[:r] V[:, :r]ᵀ`.
pub fn truncate(f: &SvdFactors, r: usize) -> Result<Matrix> {
    f.check_rank(r)?;
    let (d, p) = f.shape();
    let mut out = Matrix::zeros(d, p);
    for j in 0..r {
        let s = f.sigma[j];
        if s == 0.0 {
            continue;
        }
        for i in 0..d {
            let ui = f.u[(i, j)] * s;
            if ui == 0.0 {
                continue;
            }
            for c in 0..p {
                out[(i, c)] += ui * f.v[(c, j)];
            }
        }
    }
    Ok(out)
}

/// `sqrt(Σ_{j>r} σ_j²)`, the Frobenius error of the rank-`r` truncation.
pub fn truncation_error(f: &SvdFactors, r: usize) -> Result<f64> {
    f.check_rank(r)?;
    Ok(f.sigma[r..].iter().fold(0.0, |acc, s| acc + s * s).sqrt())
}

/// Truncation error divided by `‖W‖_F` for every `r` in `1..=k`; zero for a
/// zero matrix.
pub fn error_ratio_curve(f: &SvdFactors) -> Vec<f64> {
    let total = f.norm();
    let k = f.k();
    // Suffix sums from the small end keep tiny tails accurate.
    let mut tails = vec![0.0; k];
    let mut acc = 0.0;
    for r in (1..k).rev() {
        acc += f.sigma[r] * f.sigma[r];
        tails[r - 1] = acc;
    }
    tails
        .into_iter()
        .map(|t| if total == 0.0 { 0.0 } else { t.sqrt() / total })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct JacobiOutput {
    /// `W V`: mutually orthogonal, unnormalized columns.
    scaled: Vec<Vec<f64>>,
    sigma: Vec<f64>,
    /// Accumulated rotations (columns of `V`).
    rotations: Vec<Vec<f64>>,
    sweeps: usize,
}

/// One-sided Jacobi on a matrix with `rows >= cols`. Output is unsorted.
fn jacobi_tall(w: &Matrix) -> JacobiOutput {
    let (d, p) = w.shape();
    let mut cols: Vec<Vec<f64>> = (0..p).map(|j| w.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..p)
        .map(|j| (0..p).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let zero_sq = (ZERO_COLUMN_RTOL * frobenius_norm(w)).powi(2);
    let tol = (d as f64 * f64::EPSILON).max(1e-15);

    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for i in 0..p {
            for j in (i + 1)..p {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                if alpha <= zero_sq || beta <= zero_sq {
                    continue;
                }
                let gamma = dot(&cols[i], &cols[j]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma = cols
        .iter()
        .map(|c| {
            let sq = dot(c, c);
            if sq <= zero_sq {
                0.0
            } else {
                sq.sqrt()
            }
        })
        .collect();
    JacobiOutput {
        scaled: cols,
        sigma,
        rotations: v,
        sweeps,
    }
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (a, b) = (&mut lo[i], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Sorts by descending sigma (ties by original index), normalizes the
/// scaled side, completes null directions and fixes signs on `u`.
fn finish(out: JacobiOutput, transposed: bool) -> SvdFactors {
    let JacobiOutput {
        scaled,
        sigma,
        rotations,
        sweeps,
    } = out;
    let n = scaled[0].len();
    let k = sigma.len();
    let mut order: Vec<usize> = (0..k).collect();
    // sort_by is stable, so equal values keep column order.
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let mut normalized: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut orth: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut sorted_sigma = Vec::with_capacity(k);
    let mut pending_null = Vec::new();
    for (slot, &idx) in order.iter().enumerate() {
        let s = sigma[idx];
        sorted_sigma.push(s);
        orth.push(rotations[idx].clone());
        if s > 0.0 {
            normalized.push(scaled[idx].iter().map(|x| x / s).collect());
        } else {
            normalized.push(vec![0.0; n]);
            pending_null.push(slot);
        }
    }
    for slot in pending_null {
        normalized[slot] = complete_basis(&normalized, slot, n);
    }

    let (mut u_cols, mut v_cols) = if transposed {
        (orth, normalized)
    } else {
        (normalized, orth)
    };
    for (uc, vc) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let lead = uc.iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(0.0);
        if lead < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let d = u_cols[0].len();
    let p = v_cols[0].len();
    SvdFactors {
        u: Matrix::from_fn(d, k, |i, j| u_cols[j][i]),
        sigma: sorted_sigma,
        v: Matrix::from_fn(p, k, |i, j| v_cols[j][i]),
        sweeps,
    }
}

/// Unit vector orthogonal to every column in `cols` except `slot`: the
/// standard basis vector with the largest Gram–Schmidt residual.
fn complete_basis(cols: &[Vec<f64>], slot: usize, d: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..d {
        let mut cand: Vec<f64> = (0..d).map(|i| if i == e { 1.0 } else { 0.0 }).collect();
        // Two passes of modified Gram–Schmidt.
        for _ in 0..2 {
            for (idx, c) in cols.iter().enumerate() {
                if idx == slot {
                    continue;
                }
                let proj = dot(&cand, c);
                if proj != 0.0 {
                    cand.iter_mut().zip(c).for_each(|(x, y)| *x -= proj * y);
                }
            }
        }
        let n = dot(&cand, &cand).sqrt();
        if best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, cand));
        }
    }
    let (n, mut cand) = best.expect("d > 0");
    assert!(n > 1e-8, "fewer than d orthonormal columns always leave a free direction");
    // Re-orthogonalize once more after normalizing for full precision.
    cand.iter_mut().for_each(|x| *x /= n);
    for (idx, c) in cols.iter().enumerate() {
        if idx != slot {
            let proj = dot(&cand, c);
            cand.iter_mut().zip(c).for_each(|(x, y)| *x -= proj * y);
        }
    }
    let n = dot(&cand, &cand).sqrt();
    cand.into_iter().map(|x| x / n).collect()
}
