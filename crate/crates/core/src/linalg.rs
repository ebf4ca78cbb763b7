//! Dense row-major `f64` matrices and a one-sided Jacobi SVD.
//!
//! Sizes in this toolkit are modest (pooled vectors, PCA bases, cross-covariances),
//! so everything here is straightforward loops with 64-bit accumulation.

use std::fmt;

use crate::error::{Error, Result};

/// Off-diagonal threshold for Jacobi convergence, relative to column norms.
pub const JACOBI_TOL: f64 = 1e-12;
/// Sweep cap for Jacobi iteration.
pub const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Wraps a row-major buffer. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length != rows * cols");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::DimMismatch(format!(
                "t_matmul {}x{}ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let b_row = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch(format!(
                "sub {}x{} - {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix::from_vec(self.rows, self.cols, data))
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|v| v * alpha).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Column means.
    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (m, v) in means.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        if self.rows > 0 {
            let n = self.rows as f64;
            means.iter_mut().for_each(|m| *m /= n);
        }
        means
    }

    /// Copy with column means subtracted; returns the means too.
    pub fn centered(&self) -> (Matrix, Vec<f64>) {
        let means = self.column_means();
        let mut out = self.clone();
        for r in 0..out.rows {
            for (v, m) in out.row_mut(r).iter_mut().zip(&means) {
                *v -= m;
            }
        }
        (out, means)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `‖selfᵀ self − I‖_F`, the orthonormality residual of the columns.
    pub fn orthonormality_residual(&self) -> f64 {
        let gram = self.t_matmul(self).expect("square gram");
        gram.sub(&Matrix::identity(self.cols))
            .expect("same shape")
            .frobenius_norm()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Thin singular value decomposition `A = U · diag(S) · Vᵀ`.
///
/// For an `m × n` input with `p = min(m, n)`: `u` is `m × p`, `v` is `n × p`,
/// singular values are sorted non-increasing. Columns of `u` belonging to
/// zero singular values are completed to an orthonormal set.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
    pub sweeps: usize,
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.rows >= a.cols {
        svd_tall(a)
    } else {
        let t = svd_tall(&a.transpose())?;
        Ok(Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
            sweeps: t.sweeps,
        })
    }
}

fn svd_tall(a: &Matrix) -> Result<Svd> {
    let (m, n) = (a.rows, a.cols);
    // Work column-major: cols[j] is the j-th column of the evolving A·V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut sweeps = 0;
    let mut converged = n < 2;
    let mut residual = 0.0f64;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        residual = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= JACOBI_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        converged = residual <= JACOBI_TOL;
    }
    if !converged {
        return Err(Error::SvdNoConvergence { sweeps, residual });
    }

    let mut order: Vec<(f64, usize)> = cols.iter().enumerate().map(|(j, c)| (dot(c, c).sqrt(), j)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let scale = order.first().map_or(0.0, |o| o.0);
    let zero_cut = scale * (m.max(n) as f64) * f64::EPSILON;
    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut singular_values = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (dst, &(sigma, src)) in order.iter().enumerate() {
        singular_values.push(sigma);
        for r in 0..n {
            v[(r, dst)] = vcols[src][r];
        }
        if sigma > zero_cut && sigma > 0.0 {
            for r in 0..m {
                u[(r, dst)] = cols[src][r] / sigma;
            }
        } else {
            missing.push(dst);
        }
    }
    complete_columns(&mut u, &missing);
    Ok(Svd {
        u,
        singular_values,
        v,
        sweeps,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fills the listed columns of `u` with unit vectors orthogonal to all other
/// columns, trying standard basis vectors in order.
fn complete_columns(u: &mut Matrix, missing: &[usize]) {
    let m = u.rows;
    let mut basis_idx = 0;
    for &col in missing {
        while basis_idx < m {
            let mut cand = vec![0.0; m];
            cand[basis_idx] = 1.0;
            basis_idx += 1;
            // Two Gram-Schmidt passes for stability.
            for _ in 0..2 {
                for other in 0..u.cols {
                    if other == col || missing.contains(&other) && other > col {
                        continue;
                    }
                    let proj: f64 = (0..m).map(|r| u[(r, other)] * cand[r]).sum();
                    for (r, c) in cand.iter_mut().enumerate() {
                        *c -= proj * u[(r, other)];
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-8 {
                for (r, c) in cand.iter().enumerate() {
                    u[(r, col)] = c / norm;
                }
                break;
            }
        }
    }
}

/// Orthonormalizes the columns of `a` by modified Gram-Schmidt (the Q of a thin QR).
/// Returns an error if the columns are numerically dependent.
pub fn orthonormalize_columns(a: &Matrix) -> Result<Matrix> {
    let mut q = a.clone();
    for j in 0..q.cols {
        for i in 0..j {
            let proj: f64 = (0..q.rows).map(|r| q[(r, i)] * q[(r, j)]).sum();
            for r in 0..q.rows {
                let qi = q[(r, i)];
                q[(r, j)] -= proj * qi;
            }
        }
        let norm: f64 = (0..q.rows).map(|r| q[(r, j)].powi(2)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::DimMismatch(format!("column {j} is linearly dependent")));
        }
        for r in 0..q.rows {
            q[(r, j)] /= norm;
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(s: &Svd) -> Matrix {
        let mut us = s.u.clone();
        for r in 0..us.rows() {
            for c in 0..us.cols() {
                us[(r, c)] *= s.singular_values[c];
            }
        }
        us.matmul(&s.v.transpose()).unwrap()
    }

    #[test]
    fn svd_of_diagonal() {
        let a = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, -5.0]]);
        let s = svd(&a).unwrap();
        assert_eq!(s.singular_values, vec![5.0, 3.0]);
        assert!(reconstruct(&s).sub(&a).unwrap().frobenius_norm() < 1e-14);
    }

    #[test]
    fn svd_wide_and_tall_reconstruct() {
        let a = Matrix::from_rows(&[
            vec![1.0, 2.0, 3.0, 4.0],
            vec![-1.0, 0.5, 2.0, 0.0],
            vec![0.3, -0.7, 1.1, 2.2],
        ]);
        for m in [a.clone(), a.transpose()] {
            let s = svd(&m).unwrap();
            assert!(reconstruct(&s).sub(&m).unwrap().frobenius_norm() < 1e-12);
            assert!(s.u.orthonormality_residual() < 1e-12);
            assert!(s.v.orthonormality_residual() < 1e-12);
            assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_rank_deficient_completes_u() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]]);
        let s = svd(&a).unwrap();
        assert!(s.singular_values[1].abs() < 1e-12);
        assert!(s.u.orthonormality_residual() < 1e-12);
        assert!(reconstruct(&s).sub(&a).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn zero_matrix_svd() {
        let a = Matrix::zeros(3, 3);
        let s = svd(&a).unwrap();
        assert!(s.singular_values.iter().all(|&v| v == 0.0));
        assert!(s.u.orthonormality_residual() < 1e-12);
    }

    #[test]
    fn gram_schmidt_orthonormal() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        let q = orthonormalize_columns(&a).unwrap();
        assert!(q.orthonormality_residual() < 1e-14);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        assert!(a.matmul(&Matrix::zeros(2, 3)).is_err());
        assert_eq!(a.t_matmul(&Matrix::zeros(2, 4)).unwrap().rows(), 3);
    }
}
