// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense 64-bit linear algebra and activation kernels.
//!
//! Every dot product is accumulated strictly left to right so results are
//! reproducible bit for bit across runs and thread counts.

mod svd;

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};

pub use svd::{svd, SvdFactorization};

/// A dense column vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &[f64]) {
        debug_assert_eq!(self.data.len(), other.len());
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += scale * b;
        }
    }

    pub fn scaled(&self, scale: f64) -> Vector {
        self.data.iter().map(|x| x * scale).collect()
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        max_abs_diff(&self.data, other)
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

impl From<&[f64]> for Vector {
    fn from(data: &[f64]) -> Self {
        Self { data: data.to_vec() }
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self { data: iter.into_iter().collect() }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LensError::Shape { op: "from_vec", left: (rows, cols), right: (data.len(), 1) });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(LensError::Domain(format!("non-finite entry at ({}, {})", i / cols.max(1), i % cols.max(1))));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(LensError::Shape { op: "from_rows", left: (i, row.len()), right: (0, cols) });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vector {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Copies columns `start..end` into a new `rows × (end - start)` matrix.
    pub fn column_block(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols, "column block out of range");
        let width = end - start;
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.data[r * self.cols + start..r * self.cols + end]);
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LensError::Shape { op: "matmul", left: self.shape(), right: other.shape() });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.cols {
                let mut acc = 0.0;
                for (k, &aik) in a.iter().enumerate() {
                    acc += aik * other.data[k * other.cols + j];
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }

    /// Matrix-vector product `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(LensError::Shape { op: "matvec", left: self.shape(), right: (v.len(), 1) });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// Product of the column block `start..end` with `v`, without copying.
    pub fn matvec_columns(&self, start: usize, end: usize, v: &[f64]) -> Result<Vector> {
        if end > self.cols || start > end || end - start != v.len() {
            return Err(LensError::Shape {
                op: "matvec_columns",
                left: (self.rows, end.saturating_sub(start)),
                right: (v.len(), 1),
            });
        }
        Ok((0..self.rows).map(|r| dot(&self.row(r)[start..end], v)).collect())
    }

    /// `self += scale · u vᵀ`.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(LensError::Shape { op: "add_outer", left: self.shape(), right: (u.len(), v.len()) });
        }
        for (r, &ur) in u.iter().enumerate() {
            for (x, &vc) in self.row_mut(r).iter_mut().zip(v) {
                *x += scale * ur * vc;
            }
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Left-to-right dot product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vector> {
    if v.is_empty() {
        return Err(LensError::Domain("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(LensError::Domain("softmax of a non-finite vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `gain_i · v_i / sqrt(mean(v²) + epsilon)`; a zero denominator yields zeros.
pub fn rms_norm(v: &[f64], gain: &[f64], epsilon: f64) -> Result<Vector> {
    if v.len() != gain.len() {
        return Err(LensError::Shape { op: "rms_norm", left: (v.len(), 1), right: (gain.len(), 1) });
    }
    if v.is_empty() {
        return Ok(Vector::zeros(0));
    }
    let mean_sq = dot(v, v) / v.len() as f64;
    let denom = (mean_sq + epsilon).sqrt();
    if denom == 0.0 {
        return Ok(Vector::zeros(v.len()));
    }
    Ok(v.iter().zip(gain).map(|(x, g)| g * x / denom).collect())
}

/// SiLU activation `x · sigmoid(x)`.
#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_times_vector() {
        let v = [1.5, -2.0, 3.25];
        assert_eq!(&*Matrix::identity(3).matvec(&v).unwrap(), &v);
    }

    #[test]
    fn zero_matrix_annihilates() {
        let out = Matrix::zeros(4, 3).matvec(&[1.0, 2.0, 3.0]).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 4, 3);
        let got = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert_eq!(got.get(i, j).to_bits(), acc.to_bits());
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(Matrix::zeros(2, 3).matvec(&[1.0]).is_err());
    }

    #[test]
    fn identity_is_neutral_for_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 6, 5);
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ai = a.matmul(&Matrix::identity(5)).unwrap();
        assert_eq!(ai.matvec(&v).unwrap(), a.matvec(&v).unwrap());
    }

    #[test]
    fn softmax_symmetric_pair() {
        assert_eq!(&*softmax(&[0.0, 0.0]).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(LensError::Domain(_))));
    }

    #[test]
    fn softmax_matches_compensated_oracle() {
        // exp/sum without max-subtraction, Neumaier-compensated sum.
        let v = [1.0f64, 2.0, 3.0];
        let exps: Vec<f64> = v.iter().map(|x| x.exp()).collect();
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &e in &exps {
            let t = sum + e;
            if sum.abs() >= e.abs() {
                comp += (sum - t) + e;
            } else {
                comp += (e - t) + sum;
            }
            sum = t;
        }
        let total = sum + comp;
        let got = softmax(&v).unwrap();
        for (g, e) in got.iter().zip(&exps) {
            assert!((g - e / total).abs() <= 1e-12);
        }
        assert!((got[0] - 0.090_030_573_170_380_46).abs() <= 1e-12);
    }

    #[test]
    fn rms_norm_constant_vector() {
        assert_eq!(&*rms_norm(&[2.0, 2.0, 2.0], &[1.0, 1.0, 1.0], 0.0).unwrap(), &[1.0, 1.0, 1.0]);
        let z = rms_norm(&[2.0, -1.0, 0.5], &[0.0; 3], 1e-6).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
        assert!(rms_norm(&[1.0], &[1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn rms_norm_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..17).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g: Vec<f64> = (0..17).map(|_| rng.random_range(0.0..2.0)).collect();
        let eps = 1e-5;
        let mut ss = 0.0;
        for x in &v {
            ss += x * x;
        }
        let scale = 1.0 / (ss / 17.0 + eps).sqrt();
        let got = rms_norm(&v, &g, eps).unwrap();
        for i in 0..17 {
            assert!((got[i] - g[i] * v[i] * scale).abs() <= 1e-12);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in prop::collection::vec(-1e4f64..1e4, 1..64)) {
            let p = softmax(&v).unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-20f64..20.0, 1..16), c in -50f64..50.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = softmax(&v).unwrap();
            let b = softmax(&shifted).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }
}
