//! Small dense row-major matrices and Cholesky factorization.
//!
//! Problem sizes here are tiny (dozens of rows), so everything is written as
//! plain loops over contiguous storage.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix storage size mismatch");
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows. Returns `None` for ragged input.
    pub fn from_rows<R: AsRef<[S]>>(rows: &[R]) -> Option<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return None;
            }
            data.extend_from_slice(r);
        }
        Some(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_f64_rows<R: AsRef<[f64]>>(rows: &[R]) -> Option<Self> {
        let converted: Vec<Vec<S>> = rows
            .iter()
            .map(|r| r.as_ref().iter().map(|&v| S::lit(v)).collect())
            .collect();
        Self::from_rows(&converted)
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<S>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == S::zero() {
                    continue;
                }
                let orow = other.row(k);
                let dst = out.row_mut(i);
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn add_diagonal(&mut self, value: S) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self[(i, i)] += value;
        }
    }

    pub fn scale(&mut self, factor: S) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }

    /// Frobenius inner product.
    pub fn frobenius_dot(&self, other: &Self) -> S {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        dot(&self.data, &other.data)
    }

    pub fn frobenius_norm(&self) -> S {
        self.frobenius_dot(self).sqrt()
    }
}

impl<S> Index<(usize, usize)> for Matrix<S> {
    type Output = S;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S> IndexMut<(usize, usize)> for Matrix<S> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky<S> {
    l: Matrix<S>,
}

impl<S: Scalar> Cholesky<S> {
    /// Factorizes a symmetric matrix; `None` if it is not numerically positive definite.
    pub fn new(a: &Matrix<S>) -> Option<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "cholesky needs a square matrix");
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > S::zero()) || !diag.is_finite() {
                return None;
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Some(Self { l })
    }

    /// Retries with diagonal jitter `start, 10·start, …` up to `max`.
    /// Returns the factor and the jitter that succeeded (zero if none was needed
    /// and `start` is zero).
    pub fn with_jitter(a: &Matrix<S>, start: S, max: S) -> Option<(Self, S)> {
        let mut jitter = start;
        loop {
            let mut shifted = a.clone();
            shifted.add_diagonal(jitter);
            if let Some(c) = Self::new(&shifted) {
                return Some((c, jitter));
            }
            if jitter >= max {
                return None;
            }
            jitter = if jitter == S::zero() {
                S::lit(1e-8)
            } else {
                (jitter * S::lit(10.0)).min(max)
            };
        }
    }

    pub fn factor(&self) -> &Matrix<S> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &[S]) -> Vec<S> {
        let n = self.dim();
        let mut x = b.to_vec();
        for i in 0..n {
            let row = self.l.row(i);
            let s = dot(&row[..i], &x[..i]);
            x[i] = (x[i] - s) / row[i];
        }
        x
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &[S]) -> Vec<S> {
        let n = self.dim();
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[S]) -> Vec<S> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// Solves `L X = B` column by column.
    pub fn solve_lower_matrix(&self, b: &Matrix<S>) -> Matrix<S> {
        let n = self.dim();
        assert_eq!(b.nrows(), n);
        let mut x = b.clone();
        for c in 0..b.ncols() {
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= self.l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
        }
        x
    }

    pub fn inverse(&self) -> Matrix<S> {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![S::zero(); n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = S::zero());
            e[c] = S::one();
            let col = self.solve(&e);
            for r in 0..n {
                inv[(r, c)] = col[r];
            }
        }
        inv
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> S {
        let two = S::lit(2.0);
        (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<S>() * two
    }

    /// `L v` for a vector `v`.
    pub fn mul_lower(&self, v: &[S]) -> Vec<S> {
        let n = self.dim();
        (0..n).map(|i| dot(&self.l.row(i)[..=i], &v[..=i])).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd3() -> Matrix<f64> {
        Matrix::from_rows(&[[4.0, 2.0, 0.6], [2.0, 3.0, 0.4], [0.6, 0.4, 2.0]]).unwrap()
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = spd3();
        let c = Cholesky::new(&a).unwrap();
        let l = c.factor();
        let back = l.matmul(&l.transpose());
        assert!(back.max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn solve_and_inverse_agree() {
        let a = spd3();
        let c = Cholesky::new(&a).unwrap();
        let b = [1.0, -2.0, 0.5];
        let x = c.solve(&b);
        let ax = a.matvec(&x);
        for (u, v) in ax.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        let prod = a.matmul(&c.inverse());
        assert!(prod.max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn not_positive_definite_is_rejected() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(Cholesky::new(&a).is_none());
        assert!(Cholesky::with_jitter(&a, 1e-8, 1e-4).is_none());
    }

    #[test]
    fn jitter_escalates_for_singular_matrix() {
        let a = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let (_, jitter) = Cholesky::with_jitter(&a, 0.0, 1e-4).unwrap();
        assert!(jitter > 0.0 && jitter <= 1e-4);
    }

    #[test]
    fn ragged_rows_rejected() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(Matrix::from_rows(&rows).is_none());
    }

    #[test]
    fn works_in_f32() {
        let a: Matrix<f32> = Matrix::from_f64_rows(&[[2.0, 0.5], [0.5, 1.0]]).unwrap();
        let c = Cholesky::new(&a).unwrap();
        let x = c.solve(&[1.0, 1.0]);
        let ax = a.matvec(&x);
        assert!((ax[0] - 1.0).abs() < 1e-5 && (ax[1] - 1.0).abs() < 1e-5);
    }
}
