// SPDX-License-Identifier: MIT OR Apache-2.0

//! One-sided (Hestenes) Jacobi singular value decomposition.

use serde::{Deserialize, Serialize};

use super::{dot, Matrix, Vector};
use crate::error::{LensError, Result};

const MAX_SWEEPS: usize = 80;
const ORTHO_TOL: f64 = 1e-15;
/// Singular values at or below this fraction of σ_max do not count toward rank.
pub const RANK_TOL: f64 = 1e-12;

/// `m = Σ σ_i u_i v_iᵀ` with `min(rows, cols)` retained terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactorization {
    pub u_vectors: Vec<Vector>,
    pub singular_values: Vec<f64>,
    pub v_vectors: Vec<Vector>,
    /// Number of singular values above `RANK_TOL · σ_max`.
    pub rank: usize,
}

impl SvdFactorization {
    pub fn len(&self) -> usize {
        self.singular_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.singular_values.is_empty()
    }

    pub fn reconstruct(&self) -> Matrix {
        let rows = self.u_vectors.first().map_or(0, |u| u.dim());
        let cols = self.v_vectors.first().map_or(0, |v| v.dim());
        let mut out = Matrix::zeros(rows, cols);
        for ((u, &s), v) in self.u_vectors.iter().zip(&self.singular_values).zip(&self.v_vectors) {
            out.add_outer(s, u, v).expect("factor dimensions agree");
        }
        out
    }
}

/// Computes the SVD of `m`.
///
/// Singular values come back non-increasing with ties kept in column order,
/// and every pair is signed so the first nonzero entry of `v_i` is positive.
pub fn svd(m: &Matrix) -> Result<SvdFactorization> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(LensError::Domain(format!("svd of an empty {}x{} matrix", m.rows(), m.cols())));
    }
    if !m.is_finite() {
        return Err(LensError::Domain("svd of a non-finite matrix".into()));
    }
    let mut f = if m.rows() >= m.cols() {
        tall_svd(m)
    } else {
        let t = tall_svd(&m.transpose());
        SvdFactorization {
            u_vectors: t.v_vectors,
            singular_values: t.singular_values,
            v_vectors: t.u_vectors,
            rank: t.rank,
        }
    };
    for (u, v) in f.u_vectors.iter_mut().zip(f.v_vectors.iter_mut()) {
        let lead = v.iter().copied().find(|x| x.abs() > RANK_TOL).unwrap_or(0.0);
        if lead < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(f)
}

/// Jacobi on a matrix with rows ≥ cols.
fn tall_svd(m: &Matrix) -> SvdFactorization {
    let (rows, n) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..n).map(|c| m.column(c).into_inner()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + 1.0f64.hypot(zeta));
                let c = 1.0 / 1.0f64.hypot(t);
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma_max = norms[order[0]];
    let cutoff = RANK_TOL * sigma_max;
    let rank = norms.iter().filter(|&&s| s > cutoff && s > 0.0).count();

    let mut u_vectors: Vec<Vector> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    let mut v_vectors = Vec::with_capacity(n);
    for &j in &order {
        let sigma = norms[j];
        let u = if sigma > cutoff && sigma > 0.0 {
            let mut u: Vec<f64> = a[j].iter().map(|x| x / sigma).collect();
            orthogonalize(&mut u, &u_vectors);
            u
        } else {
            complete_basis(rows, &u_vectors)
        };
        u_vectors.push(u.into());
        singular_values.push(sigma);
        v_vectors.push(Vector::from(std::mem::take(&mut v[j])));
    }
    SvdFactorization { u_vectors, singular_values, v_vectors, rank }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Modified Gram-Schmidt against `basis`, then renormalize.
fn orthogonalize(u: &mut [f64], basis: &[Vector]) {
    for _ in 0..2 {
        for b in basis {
            let proj = dot(u, b);
            for (x, y) in u.iter_mut().zip(b.iter()) {
                *x -= proj * y;
            }
        }
    }
    let norm = dot(u, u).sqrt();
    if norm > 0.0 {
        u.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Unit vector orthogonal to `basis`, chosen deterministically from the
/// standard basis candidate with the largest residual.
fn complete_basis(dim: usize, basis: &[Vector]) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 0..dim {
        let mut e = vec![0.0; dim];
        e[k] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&e, b);
                for (x, y) in e.iter_mut().zip(b.iter()) {
                    *x -= proj * y;
                }
            }
        }
        let norm = dot(&e, &e).sqrt();
        if best.as_ref().is_none_or(|(n, _)| norm > *n) {
            best = Some((norm, e));
        }
    }
    let (norm, mut e) = best.expect("dim >= 1");
    e.iter_mut().for_each(|x| *x /= norm);
    e
}
