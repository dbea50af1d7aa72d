//! Reproducing kernels of the cubic Sobolev space `W₂²[0,1] = H₀ ⊕ H₁` and the
//! basis matrices shared by both mixture components.
//!
//! The null space `H₀` is spanned by `{1, t}`; `H₁` has kernel
//! `R1(s, t) = k2(s) k2(t) - k4(|s - t|)` built from scaled Bernoulli polynomials.

use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Default cap on the number of knots.
pub const DEFAULT_KNOT_CAP: usize = 64;

#[inline]
pub fn k1<T: Scalar>(t: T) -> T {
    t - T::lit(0.5)
}

#[inline]
pub fn k2<T: Scalar>(t: T) -> T {
    let a = k1(t);
    (a * a - T::lit(1.0 / 12.0)) * T::lit(0.5)
}

#[inline]
pub fn k4<T: Scalar>(t: T) -> T {
    let a = k1(t);
    let a2 = a * a;
    (a2 * a2 - a2 * T::lit(0.5) + T::lit(7.0 / 240.0)) / T::lit(24.0)
}

/// Kernel of the null space `H₀`.
#[inline]
pub fn kernel_r0<T: Scalar>(s: T, t: T) -> T {
    T::one() + k1(s) * k1(t)
}

/// Kernel of the penalized space `H₁`.
#[inline]
pub fn kernel_r1<T: Scalar>(s: T, t: T) -> T {
    k2(s) * k2(t) - k4((s - t).abs())
}


/// `n × n` matrix `[R1(t_a, t_b)]`.
pub fn r1_gram<T: Scalar>(t: &[T]) -> Matrix<T> {
    #[cfg(test)]
    probe::record();
    let n = t.len();
    let mut g = Matrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            g[(a, b)] = kernel_r1(t[a], t[b]);
        }
    }
    g.mirror_upper();
    g
}

/// `[R1(s_a, t_b)]` for two point sets.
pub fn r1_cross<T: Scalar>(s: &[T], t: &[T]) -> Matrix<T> {
    Matrix::from_fn(s.len(), t.len(), |a, b| kernel_r1(s[a], t[b]))
}

/// Basis matrices of the representer expansion
/// `f(t) = d1 + d2 t + Σ_l c_l R1(z_l, t)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplineBasis<T> {
    /// `N × 2`, columns `1` and `t`.
    pub s: Matrix<T>,
    /// `N × e`, entries `R1(τ, z_l)`.
    pub r: Matrix<T>,
    /// `e × e`, entries `R1(z_l, z_k)`.
    pub q: Matrix<T>,
    pub knots: Vec<T>,
}

/// Sorted distinct values (exact comparison).
pub fn distinct_sorted<T: Scalar>(values: &[T]) -> Vec<T> {
    let mut v: Vec<T> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    v.dedup();
    v
}

/// Chooses knots: every distinct time when there are at most `cap` of them,
/// otherwise `cap` values at equally spaced quantile positions of the sorted
/// distinct times.
pub fn select_knots<T: Scalar>(times: &[T], cap: usize) -> Result<Vec<T>> {
    if cap < 2 {
        return Err(Error::InvalidParameter(format!("knot cap {cap} < 2")));
    }
    let distinct = distinct_sorted(times);
    if distinct.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 distinct time points, found {}",
            distinct.len()
        )));
    }
    if distinct.len() <= cap {
        return Ok(distinct);
    }
    let last = (distinct.len() - 1) as f64;
    Ok((0..cap)
        .map(|j| {
            let pos = (j as f64 * last / (cap - 1) as f64).round() as usize;
            distinct[pos]
        })
        .collect())
}

impl<T: Scalar> SplineBasis<T> {
    /// Builds the basis for stacked scaled times `τ_1..τ_N` in `[0, 1]`.
    pub fn from_times(times: &[T], knot_cap: usize) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidParameter("no observations".into()));
        }
        if let Some(bad) = times
            .iter()
            .find(|&&t| !(t >= T::zero() && t <= T::one()))
        {
            return Err(Error::TimeOutOfRange {
                value: bad.to_f64_lossy(),
                t_min: 0.0,
                t_max: 1.0,
            });
        }
        let knots = select_knots(times, knot_cap)?;
        Ok(Self::with_knots(times, knots))
    }

    /// Builds the basis for the given times against an explicit knot set.
    pub fn with_knots(times: &[T], knots: Vec<T>) -> Self {
        let s = Matrix::from_fn(times.len(), 2, |i, j| if j == 0 { T::one() } else { times[i] });
        let r = r1_cross(times, &knots);
        let q = r1_gram(&knots);
        Self { s, r, q, knots }
    }

    #[inline]
    pub fn n_obs(&self) -> usize {
        self.s.rows()
    }

    #[inline]
    pub fn n_knots(&self) -> usize {
        self.knots.len()
    }

    /// Rows of `[S R]` for arbitrary evaluation points.
    pub fn design_at(&self, t: &[T]) -> (Matrix<T>, Matrix<T>) {
        let s = Matrix::from_fn(t.len(), 2, |i, j| if j == 0 { T::one() } else { t[i] });
        (s, r1_cross(t, &self.knots))
    }
}

/// Basis over every observation of a dataset, in subject order.
pub fn build_basis(dataset: &LongitudinalDataset, knot_cap: usize) -> Result<SplineBasis<f64>> {
    let times = dataset.stacked_times();
    SplineBasis::from_times(&times, knot_cap)
}
