//! Per-subject marginal covariance of the random intercept/slope/smooth-effect
//! model, its transforms, and the weighted whitening used by the spline solver.
//!
//! `V = σ²_inter 11ᵀ + σ_is (1tᵀ + t1ᵀ) + σ²_slope ttᵀ + σ²_non R1(t, t) + σ² I`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::r1_gram;
use crate::linalg::{Cholesky, Matrix};
use crate::scalar::Scalar;

/// Posterior weights below this are floored before whitening.
pub const WEIGHT_FLOOR: f64 = 1e-8;

/// Random-effect variance components of one mixture component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents<T> {
    pub sigma2_inter: T,
    pub sigma_is: T,
    pub sigma2_slope: T,
    pub sigma2_non: T,
}

impl<T: Scalar> VarianceComponents<T> {
    pub fn zero() -> Self {
        Self {
            sigma2_inter: T::zero(),
            sigma_is: T::zero(),
            sigma2_slope: T::zero(),
            sigma2_non: T::zero(),
        }
    }

    /// Checks non-negative variances and a PSD intercept/slope block.
    pub fn validate(&self) -> Result<()> {
        let vals = [self.sigma2_inter, self.sigma_is, self.sigma2_slope, self.sigma2_non];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("variance components".into()));
        }
        if self.sigma2_inter < T::zero() || self.sigma2_slope < T::zero() || self.sigma2_non < T::zero() {
            return Err(Error::InvalidParameter("negative variance component".into()));
        }
        let bound = self.sigma2_inter * self.sigma2_slope;
        if self.sigma_is * self.sigma_is > bound * (T::one() + T::lit(1e-12)) + T::min_positive_value() {
            return Err(Error::InvalidParameter(format!(
                "intercept/slope block not PSD: σ_is² = {} > σ²_inter σ²_slope = {}",
                (self.sigma_is * self.sigma_is).to_f64_lossy(),
                bound.to_f64_lossy()
            )));
        }
        Ok(())
    }

    /// Components multiplied by a common factor.
    pub fn scaled(&self, s: T) -> Self {
        Self {
            sigma2_inter: self.sigma2_inter * s,
            sigma_is: self.sigma_is * s,
            sigma2_slope: self.sigma2_slope * s,
            sigma2_non: self.sigma2_non * s,
        }
    }

    /// Correlation between random intercept and slope (0 when either variance is 0).
    pub fn rho(&self) -> T {
        let d = (self.sigma2_inter * self.sigma2_slope).sqrt();
        if d > T::zero() {
            self.sigma_is / d
        } else {
            T::zero()
        }
    }
}

/// Unconstrained coordinates of one component: log variances and the
/// inverse-tanh of the intercept/slope correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupTransform<T> {
    pub log_sigma2_inter: T,
    pub log_sigma2_slope: T,
    pub rho_unconstrained: T,
    pub log_sigma2_non: T,
}

impl<T: Scalar> GroupTransform<T> {
    pub fn to_components(&self) -> VarianceComponents<T> {
        let inter = self.log_sigma2_inter.exp();
        let slope = self.log_sigma2_slope.exp();
        let rho = self.rho_unconstrained.tanh();
        VarianceComponents {
            sigma2_inter: inter,
            sigma_is: rho * inter.sqrt() * slope.sqrt(),
            sigma2_slope: slope,
            sigma2_non: self.log_sigma2_non.exp(),
        }
    }

    /// Inverse of [`to_components`](Self::to_components); variances must be
    /// strictly positive and the correlation strictly inside `(-1, 1)`.
    pub fn from_components(c: &VarianceComponents<T>) -> Result<Self> {
        c.validate()?;
        if c.sigma2_inter <= T::zero() || c.sigma2_slope <= T::zero() || c.sigma2_non <= T::zero() {
            return Err(Error::InvalidParameter(
                "log transform needs strictly positive variances".into(),
            ));
        }
        let rho = c.rho();
        if rho.abs() >= T::one() {
            return Err(Error::InvalidParameter("|rho| must be < 1".into()));
        }
        Ok(Self {
            log_sigma2_inter: c.sigma2_inter.ln(),
            log_sigma2_slope: c.sigma2_slope.ln(),
            rho_unconstrained: rho.atanh(),
            log_sigma2_non: c.sigma2_non.ln(),
        })
    }

    #[inline]
    pub fn to_array(&self) -> [T; 4] {
        [
            self.log_sigma2_inter,
            self.log_sigma2_slope,
            self.rho_unconstrained,
            self.log_sigma2_non,
        ]
    }

    #[inline]
    pub fn from_array(a: [T; 4]) -> Self {
        Self {
            log_sigma2_inter: a[0],
            log_sigma2_slope: a[1],
            rho_unconstrained: a[2],
            log_sigma2_non: a[3],
        }
    }

    /// Shifts the three log-variance coordinates by `delta` (ρ unchanged).
    pub fn shift_log_scale(&self, delta: T) -> Self {
        Self {
            log_sigma2_inter: self.log_sigma2_inter + delta,
            log_sigma2_slope: self.log_sigma2_slope + delta,
            rho_unconstrained: self.rho_unconstrained,
            log_sigma2_non: self.log_sigma2_non + delta,
        }
    }
}

/// All nine unconstrained variance parameters: `log σ²` and one
/// [`GroupTransform`] per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformedVarianceVector<T> {
    pub log_sigma2: T,
    pub groups: [GroupTransform<T>; 2],
}

impl<T: Scalar> TransformedVarianceVector<T> {
    pub const LEN: usize = 9;

    pub fn to_natural(&self) -> (T, [VarianceComponents<T>; 2]) {
        (
            self.log_sigma2.exp(),
            [self.groups[0].to_components(), self.groups[1].to_components()],
        )
    }

    pub fn from_natural(sigma2: T, zeta: &[VarianceComponents<T>; 2]) -> Result<Self> {
        if !(sigma2 > T::zero()) {
            return Err(Error::InvalidParameter("sigma2 must be positive".into()));
        }
        Ok(Self {
            log_sigma2: sigma2.ln(),
            groups: [
                GroupTransform::from_components(&zeta[0])?,
                GroupTransform::from_components(&zeta[1])?,
            ],
        })
    }

    /// `[log σ², group 1 (inter, slope, ρ, non), group 2 (...)]`.
    pub fn to_vec(&self) -> Vec<T> {
        let mut v = vec![self.log_sigma2];
        v.extend(self.groups[0].to_array());
        v.extend(self.groups[1].to_array());
        v
    }

    pub fn from_slice(v: &[T]) -> Result<Self> {
        if v.len() != Self::LEN {
            return Err(Error::Dimension(format!("{} transformed variances, expected 9", v.len())));
        }
        Ok(Self {
            log_sigma2: v[0],
            groups: [
                GroupTransform::from_array([v[1], v[2], v[3], v[4]]),
                GroupTransform::from_array([v[5], v[6], v[7], v[8]]),
            ],
        })
    }

    /// Component transforms on the scale of `σ²` (random-effect variances
    /// divided by the error variance).
    pub fn relative(&self) -> [GroupTransform<T>; 2] {
        [
            self.groups[0].shift_log_scale(-self.log_sigma2),
            self.groups[1].shift_log_scale(-self.log_sigma2),
        ]
    }

    pub fn from_relative(log_sigma2: T, relative: &[GroupTransform<T>; 2]) -> Self {
        Self {
            log_sigma2,
            groups: [
                relative[0].shift_log_scale(log_sigma2),
                relative[1].shift_log_scale(log_sigma2),
            ],
        }
    }

    /// Exchanges the two components.
    pub fn swapped(&self) -> Self {
        Self {
            log_sigma2: self.log_sigma2,
            groups: [self.groups[1], self.groups[0]],
        }
    }
}

/// Writes `V` into `out` (resized when needed). `gram` is `R1(t, t)`; it is
/// only read when `sigma2_non != 0`.
pub fn fill_v<T: Scalar>(
    out: &mut Matrix<T>,
    t: &[T],
    gram: Option<&Matrix<T>>,
    zeta: &VarianceComponents<T>,
    sigma2: T,
) {
    let n = t.len();
    if out.shape() != (n, n) {
        *out = Matrix::zeros(n, n);
    }
    let use_gram = zeta.sigma2_non != T::zero();
    for a in 0..n {
        for b in a..n {
            let mut v = zeta.sigma2_inter
                + zeta.sigma_is * (t[a] + t[b])
                + zeta.sigma2_slope * t[a] * t[b];
            if use_gram {
                if let Some(g) = gram {
                    v = v + zeta.sigma2_non * g[(a, b)];
                }
            }
            if a == b {
                v = v + sigma2;
            }
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
}

/// Factored marginal covariance of one subject under one component.
#[derive(Debug, Clone)]
pub struct SubjectCovariance<T> {
    pub v: Matrix<T>,
    chol: Cholesky<T>,
    log_det: T,
}

/// Assembles and factors `V` for scaled times `t`.
pub fn assemble_v<T: Scalar>(
    t: &[T],
    zeta: &VarianceComponents<T>,
    sigma2: T,
) -> Result<SubjectCovariance<T>> {
    let gram = if zeta.sigma2_non != T::zero() {
        Some(r1_gram(t))
    } else {
        None
    };
    assemble_v_with_gram(t, gram.as_ref(), zeta, sigma2)
}

/// As [`assemble_v`] with a precomputed `R1(t, t)`.
pub fn assemble_v_with_gram<T: Scalar>(
    t: &[T],
    gram: Option<&Matrix<T>>,
    zeta: &VarianceComponents<T>,
    sigma2: T,
) -> Result<SubjectCovariance<T>> {
    if t.is_empty() {
        return Err(Error::InvalidParameter("empty time vector".into()));
    }
    if !(sigma2 > T::zero()) || !sigma2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sigma2 must be positive, got {}",
            sigma2.to_f64_lossy()
        )));
    }
    zeta.validate()?;
    if zeta.sigma2_non != T::zero() && gram.is_none() {
        return Err(Error::InvalidParameter("kernel Gram matrix required".into()));
    }
    let mut v = Matrix::zeros(t.len(), t.len());
    fill_v(&mut v, t, gram, zeta, sigma2);
    SubjectCovariance::from_matrix(v)
}

impl<T: Scalar> SubjectCovariance<T> {
    pub fn from_matrix(v: Matrix<T>) -> Result<Self> {
        let chol = Cholesky::with_jitter(&v)?;
        let log_det = chol.log_det();
        Ok(Self { v, chol, log_det })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.v.rows()
    }

    #[inline]
    pub fn log_det(&self) -> T {
        self.log_det
    }

    #[inline]
    pub fn cholesky(&self) -> &Cholesky<T> {
        &self.chol
    }

    /// `rᵀ V⁻¹ r`.
    pub fn quad_form(&self, r: &[T]) -> T {
        self.chol.quad_form_inv(r)
    }

    /// Gaussian log-density of the residual `r` under `N(0, V)`.
    pub fn log_density(&self, r: &[T]) -> T {
        let n = T::from_usize_lossy(self.dim());
        let two_pi = T::lit(2.0) * T::PI();
        -T::lit(0.5) * (n * two_pi.ln() + self.log_det + self.quad_form(r))
    }

    fn check_weight(w: T) -> Result<()> {
        if !(w >= T::lit(WEIGHT_FLOOR)) || w > T::one() + T::lit(1e-12) {
            return Err(Error::InvalidParameter(format!(
                "weight {} outside [{WEIGHT_FLOOR}, 1]",
                w.to_f64_lossy()
            )));
        }
        Ok(())
    }

    /// Lower-triangular `P = √w L⁻¹` with `Pᵀ P = w V⁻¹`.
    pub fn weighted_inverse_factor(&self, w: T) -> Result<Matrix<T>> {
        Self::check_weight(w)?;
        let n = self.dim();
        Ok(self.chol.solve_lower_matrix(&Matrix::identity(n)).scaled(w.sqrt()))
    }

    /// Applies `P` to a vector.
    pub fn whiten_vector(&self, w: T, y: &[T]) -> Result<Vec<T>> {
        Self::check_weight(w)?;
        let mut out = y.to_vec();
        self.chol.solve_lower_in_place(&mut out);
        let s = w.sqrt();
        out.iter_mut().for_each(|v| *v = *v * s);
        Ok(out)
    }

    /// Applies `P` to every column of a matrix.
    pub fn whiten_matrix(&self, w: T, m: &Matrix<T>) -> Result<Matrix<T>> {
        Self::check_weight(w)?;
        Ok(self.chol.solve_lower_matrix(m).scaled(w.sqrt()))
    }
}

/// Whitened copies of one subject's `(y, S, R)` block, so that
/// `‖ỹ - S̃d - R̃c‖² = (y - Sd - Rc)ᵀ w V⁻¹ (y - Sd - Rc)`.
pub fn whiten<T: Scalar>(
    y: &[T],
    s: &Matrix<T>,
    r: &Matrix<T>,
    cov: &SubjectCovariance<T>,
    w: T,
) -> Result<(Vec<T>, Matrix<T>, Matrix<T>)> {
    if y.len() != cov.dim() || s.rows() != cov.dim() || r.rows() != cov.dim() {
        return Err(Error::Dimension("block rows vs covariance".into()));
    }
    Ok((
        cov.whiten_vector(w, y)?,
        cov.whiten_matrix(w, s)?,
        cov.whiten_matrix(w, r)?,
    ))
}
