//! Small dense linear algebra: row-major matrices, Cholesky with jitter
//! escalation, and a cyclic Jacobi symmetric eigensolver.
//!
//! Every matrix in this crate is at most a few hundred rows on a side (per-subject
//! covariances, the `(2 + e)`-dimensional spline system), so plain loops suffice.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row-major storage.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn diagonal_from(values: &[T]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Copies rows `start..start + len` into a new matrix.
    pub fn row_block(&self, start: usize, len: usize) -> Self {
        Self {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let orow = other.row(k);
                let dst = out.row_mut(i);
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d = *d + a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(Error::Dimension(format!(
                "vector of length {} against {} columns",
                v.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ v`.
    pub fn t_matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.rows {
            return Err(Error::Dimension(format!(
                "vector of length {} against {} rows",
                v.len(),
                self.rows
            )));
        }
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + a * vi;
            }
        }
        Ok(out)
    }

    /// `selfᵀ self`.
    pub fn gram(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.cols);
        for i in 0..self.rows {
            let r = self.row(i);
            for a in 0..self.cols {
                let ra = r[a];
                if ra == T::zero() {
                    continue;
                }
                for b in a..self.cols {
                    out[(a, b)] = out[(a, b)] + ra * r[b];
                }
            }
        }
        out.mirror_upper();
        out
    }

    /// Copies the upper triangle onto the lower triangle.
    pub fn mirror_upper(&mut self) {
        for a in 0..self.rows {
            for b in (a + 1)..self.cols {
                self[(b, a)] = self[(a, b)];
            }
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Self, s: T) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension("shape mismatch in addition".into()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + s * b;
        }
        Ok(())
    }

    pub fn add_to_diagonal(&mut self, v: T) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] = self[(i, i)] + v;
        }
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.is_square()
            && (0..self.rows)
                .all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm_sq<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    lower: Matrix<T>,
    jitter: T,
}

/// Jitter schedule: first retry adds `1e-10 · trace / n`, each later retry ×10.
pub const JITTER_RETRIES: usize = 3;
const JITTER_BASE: f64 = 1e-10;

impl<T: Scalar> Cholesky<T> {
    /// Factors a symmetric positive-definite matrix; only the lower triangle is read.
    pub fn new(a: &Matrix<T>) -> Result<Self> {
        Self::factor_with_shift(a, T::zero())
    }

    /// Factors `a`, retrying with an escalating diagonal jitter on failure.
    pub fn with_jitter(a: &Matrix<T>) -> Result<Self> {
        match Self::new(a) {
            Ok(c) => Ok(c),
            Err(first) => {
                let n = a.rows().max(1);
                let scale = (a.trace() / T::from_usize_lossy(n)).abs();
                let scale = if scale > T::zero() && scale.is_finite() {
                    scale
                } else {
                    T::one()
                };
                let mut jitter = T::lit(JITTER_BASE) * scale;
                for _ in 0..JITTER_RETRIES {
                    if let Ok(c) = Self::factor_with_shift(a, jitter) {
                        return Ok(c);
                    }
                    jitter = jitter * T::lit(10.0);
                }
                Err(first)
            }
        }
    }

    fn factor_with_shift(a: &Matrix<T>, shift: T) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension("Cholesky of a non-square matrix".into()));
        }
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)] + shift;
            for k in 0..j {
                diag = diag - l[(j, k)] * l[(j, k)];
            }
            if !(diag > T::zero()) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite(format!(
                    "pivot {j} of {n} is {}",
                    diag.to_f64_lossy()
                )));
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                let (ri, rj) = (i * n, j * n);
                let ld = l.as_slice();
                for k in 0..j {
                    s = s - ld[ri + k] * ld[rj + k];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self {
            lower: l,
            jitter: shift,
        })
    }

    #[inline]
    pub fn lower(&self) -> &Matrix<T> {
        &self.lower
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// Diagonal shift that was needed for the factorization to succeed.
    #[inline]
    pub fn jitter(&self) -> T {
        self.jitter
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [T]) {
        let n = self.dim();
        let l = self.lower.as_slice();
        for i in 0..n {
            let row = &l[i * n..i * n + i];
            let s = b[i] - dot(row, &b[..i]);
            b[i] = s / l[i * n + i];
        }
    }

    /// Solves `Lᵀ x = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut [T]) {
        let n = self.dim();
        let l = self.lower.as_slice();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s = s - l[k * n + i] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    /// Returns `L⁻¹ B` for a matrix right-hand side.
    pub fn solve_lower_matrix(&self, b: &Matrix<T>) -> Matrix<T> {
        let n = self.dim();
        let cols = b.cols();
        let mut out = b.clone();
        let l = self.lower.as_slice();
        let data = out.as_mut_slice();
        for i in 0..n {
            let (done, rest) = data.split_at_mut(i * cols);
            let row = &mut rest[..cols];
            for k in 0..i {
                let lik = l[i * n + k];
                if lik == T::zero() {
                    continue;
                }
                for (o, v) in row.iter_mut().zip(&done[k * cols..(k + 1) * cols]) {
                    *o = *o - lik * *v;
                }
            }
            let lii = l[i * n + i];
            row.iter_mut().for_each(|o| *o = *o / lii);
        }
        out
    }

    /// `bᵀ A⁻¹ b`.
    pub fn quad_form_inv(&self, b: &[T]) -> T {
        let mut z = b.to_vec();
        self.solve_lower_in_place(&mut z);
        norm_sq(&z)
    }

    /// `log |A|`.
    pub fn log_det(&self) -> T {
        let n = self.dim();
        T::lit(2.0) * (0..n).map(|i| self.lower[(i, i)].ln()).sum::<T>()
    }

    /// Explicit inverse; used only where a trace against a dense matrix is needed.
    pub fn inverse(&self) -> Matrix<T> {
        let n = self.dim();
        let linv = self.solve_lower_matrix(&Matrix::identity(n));
        // A⁻¹ = L⁻ᵀ L⁻¹
        let mut out = Matrix::zeros(n, n);
        for a in 0..n {
            for b in a..n {
                let mut s = T::zero();
                for k in b.max(a)..n {
                    s = s + linv[(k, a)] * linv[(k, b)];
                }
                out[(a, b)] = s;
            }
        }
        out.mirror_upper();
        out
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending; eigenvectors
/// are the columns of the returned matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    pub values: Vec<T>,
    pub vectors: Matrix<T>,
}

impl<T: Scalar> SymmetricEigen<T> {
    /// Cyclic Jacobi rotations; accurate to working precision for small matrices.
    pub fn new(a: &Matrix<T>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension("eigen of a non-square matrix".into()));
        }
        if !a.all_finite() {
            return Err(Error::NonFinite("eigendecomposition input".into()));
        }
        let n = a.rows();
        let mut m = a.clone();
        // symmetrize from the upper triangle
        for i in 0..n {
            for j in 0..i {
                let v = (m[(i, j)] + m[(j, i)]) * T::lit(0.5);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        let mut v = Matrix::identity(n);
        let eps = T::epsilon();
        for _sweep in 0..100 {
            let mut off = T::zero();
            let mut total = T::zero();
            for i in 0..n {
                for j in 0..n {
                    let x = m[(i, j)] * m[(i, j)];
                    total = total + x;
                    if i != j {
                        off = off + x;
                    }
                }
            }
            if off <= eps * eps * total || off == T::zero() {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m[(p, q)];
                    if apq == T::zero() {
                        continue;
                    }
                    let app = m[(p, p)];
                    let aqq = m[(q, q)];
                    let theta = (aqq - app) / (T::lit(2.0) * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    let t = if theta == T::zero() { T::one() } else { t };
                    let c = T::one() / (t * t + T::one()).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m[(k, p)];
                        let mkq = m[(k, q)];
                        m[(k, p)] = c * mkp - s * mkq;
                        m[(k, q)] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[(p, k)];
                        let mqk = m[(q, k)];
                        m[(p, k)] = c * mpk - s * mqk;
                        m[(q, k)] = s * mpk + c * mqk;
                    }
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| m[(a, a)].partial_cmp(&m[(b, b)]).unwrap_or(std::cmp::Ordering::Equal));
        let values = order.iter().map(|&i| m[(i, i)]).collect();
        let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
        Ok(Self { values, vectors })
    }

    pub fn min_value(&self) -> T {
        self.values.first().copied().unwrap_or_else(T::zero)
    }

    pub fn max_value(&self) -> T {
        self.values.last().copied().unwrap_or_else(T::zero)
    }
}

/// Solves a symmetric positive-definite system, escalating jitter if needed.
pub fn solve_spd<T: Scalar>(a: &Matrix<T>, b: &[T]) -> Result<Vec<T>> {
    let chol = Cholesky::with_jitter(a)
        .map_err(|e| Error::Singular(format!("symmetric solve failed: {e}")))?;
    Ok(chol.solve(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        let b = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut a = b.gram();
        a.add_to_diagonal(0.5);
        a
    }

    #[test]
    fn cholesky_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd(7, &mut rng);
        let c = Cholesky::new(&a).unwrap();
        let l = c.lower();
        let back = l.matmul(&l.transpose()).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert_relative_eq!(back[(i, j)], a[(i, j)], epsilon = 1e-12);
            }
        }
        let b: Vec<f64> = (0..7).map(|i| i as f64 - 3.0).collect();
        let x = c.solve(&b);
        let ax = a.matvec(&x).unwrap();
        for (u, v) in ax.iter().zip(&b) {
            assert_relative_eq!(u, v, epsilon = 1e-10);
        }
        let inv = c.inverse();
        let id = a.matmul(&inv).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((id[(i, j)] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite_and_jitter_rescues_semidefinite() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(Cholesky::new(&a).is_err());
        assert!(Cholesky::with_jitter(&a).is_err());
        // rank one: ones(2,2)
        let psd = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let c = Cholesky::with_jitter(&psd).unwrap();
        assert!(c.jitter() > 0.0);
        assert!(c.jitter() <= 1e-7);
    }

    #[test]
    fn jacobi_matches_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_spd(9, &mut rng);
        let eig = SymmetricEigen::new(&a).unwrap();
        assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
        let v = &eig.vectors;
        let d = Matrix::diagonal_from(&eig.values);
        let back = v.matmul(&d).unwrap().matmul(&v.transpose()).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                assert_relative_eq!(back[(i, j)], a[(i, j)], epsilon = 1e-11);
            }
        }
        let c = Cholesky::new(&a).unwrap();
        let ld: f64 = eig.values.iter().map(|x| x.ln()).sum();
        assert_relative_eq!(c.log_det(), ld, max_relative = 1e-10);
    }

    #[test]
    fn works_in_single_precision() {
        let a = Matrix::<f32>::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let c = Cholesky::new(&a).unwrap();
        let x = c.solve(&[1.0, 2.0]);
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-5);
        let e = SymmetricEigen::new(&a).unwrap();
        assert!((e.values[0] * e.values[1] - 11.0).abs() < 1e-4);
    }

    #[test]
    fn lower_matrix_solve_matches_vector_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_spd(5, &mut rng);
        let c = Cholesky::new(&a).unwrap();
        let b = Matrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0));
        let x = c.solve_lower_matrix(&b);
        for j in 0..3 {
            let mut col = b.column(j);
            c.solve_lower_in_place(&mut col);
            for i in 0..5 {
                assert_relative_eq!(x[(i, j)], col[i], epsilon = 1e-12);
            }
        }
    }
}
