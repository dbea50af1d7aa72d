//! Weighted penalized least squares for one group's mean curve and its
//! smoothing-parameter selection by generalized maximum likelihood (GML).
//!
//! Everything works on the reduced `(2 + e)`-dimensional normal equations
//! `G = X̃ᵀX̃`, `b = X̃ᵀz`, `zᵀz` of the whitened design `X̃ = [S̃ R̃]`, so the
//! stacked `N`-row system is never formed.

use serde::{Deserialize, Serialize};

use crate::covariance::SubjectCovariance;
use crate::error::{Error, Result};
use crate::kernel::kernel_r1;
use crate::linalg::{dot, Cholesky, Matrix, SymmetricEigen};
use crate::scalar::Scalar;

/// Dimension of the unpenalized space spanned by `1` and `t`.
pub const NULL_DIM: usize = 2;

/// Fitted mean curve of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineFit<T> {
    pub d: Vec<T>,
    pub c: Vec<T>,
    /// Smoothing parameter `λ`; the penalty is `Nλ cᵀQc`.
    pub lambda: T,
    pub log10_n_lambda: T,
    /// `log M(λ)` of the GML criterion when `λ` was selected by it.
    pub gml_score: Option<T>,
}

impl<T: Scalar> SplineFit<T> {
    /// The straight line `a + b t` (no kernel part).
    pub fn line(a: T, b: T, n_knots: usize, n_total: usize, log10_n_lambda: T) -> Self {
        Self {
            d: vec![a, b],
            c: vec![T::zero(); n_knots],
            lambda: T::lit(10.0).powf(log10_n_lambda) / T::from_usize_lossy(n_total),
            log10_n_lambda,
            gml_score: None,
        }
    }

    /// Coefficients stacked as `(d, c)`.
    pub fn coefficients(&self) -> Vec<T> {
        let mut v = self.d.clone();
        v.extend_from_slice(&self.c);
        v
    }

    /// `cᵀ Q c`.
    pub fn roughness(&self, q: &Matrix<T>) -> T {
        let qc = q.matvec(&self.c).expect("knot Gram matches c");
        dot(&self.c, &qc)
    }
}

/// `f(t) = d₁ + d₂ t + Σ_l c_l R1(z_l, t)` at each scaled time.
pub fn evaluate_f<T: Scalar>(fit: &SplineFit<T>, knots: &[T], t: &[T]) -> Vec<T> {
    t.iter()
        .map(|&tj| {
            let mut f = fit.d[0] + fit.d[1] * tj;
            for (z, c) in knots.iter().zip(&fit.c) {
                f = f + *c * kernel_r1(*z, tj);
            }
            f
        })
        .collect()
}

/// How the smoothing parameter is searched, on the `log10(Nλ)` scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaSearch {
    pub floor_log10: f64,
    pub span_log10: f64,
    pub grid_points: usize,
    /// Golden-section tolerance; no refinement when `None`.
    pub tolerance_log10: Option<f64>,
    /// Explicit grid overriding `floor/span/grid_points`.
    pub grid_log10: Option<Vec<f64>>,
}

impl Default for LambdaSearch {
    fn default() -> Self {
        Self {
            floor_log10: 0.0,
            span_log10: 8.0,
            grid_points: 25,
            tolerance_log10: Some(1e-4),
            grid_log10: None,
        }
    }
}

impl LambdaSearch {
    /// Evaluates exactly the given `log10(Nλ)` values.
    pub fn fixed_grid(values: Vec<f64>, floor_log10: f64) -> Self {
        Self {
            floor_log10,
            tolerance_log10: None,
            grid_log10: Some(values),
            ..Self::default()
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        if let Some(g) = &self.grid_log10 {
            return g.clone();
        }
        let n = self.grid_points.max(1);
        if n == 1 {
            return vec![self.floor_log10];
        }
        (0..n)
            .map(|j| self.floor_log10 + self.span_log10 * j as f64 / (n - 1) as f64)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.grid();
        if g.is_empty() {
            return Err(Error::InvalidParameter("empty lambda grid".into()));
        }
        if g.iter().any(|v| !v.is_finite() || *v < self.floor_log10 - 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "lambda grid must respect the floor log10(N lambda) >= {}",
                self.floor_log10
            )));
        }
        if let Some(tol) = self.tolerance_log10 {
            if !(tol > 0.0) {
                return Err(Error::InvalidParameter("golden-section tolerance must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Reduced normal equations of the whitened, stacked problem.
#[derive(Debug, Clone)]
pub struct ReducedSystem<T> {
    pub gram: Matrix<T>,
    pub rhs: Vec<T>,
    pub yty: T,
    /// Effective number of observations `Σ_i w_i n_i`.
    pub n_eff: T,
}

impl<T: Scalar> ReducedSystem<T> {
    pub fn new(n_knots: usize) -> Self {
        let p = NULL_DIM + n_knots;
        Self {
            gram: Matrix::zeros(p, p),
            rhs: vec![T::zero(); p],
            yty: T::zero(),
            n_eff: T::zero(),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.rhs.len()
    }

    #[inline]
    pub fn n_knots(&self) -> usize {
        self.dim() - NULL_DIM
    }

    /// Adds rows of an already-whitened design `x = [S̃ R̃]` and response `z`.
    /// Only the upper triangle of `gram` is updated; call
    /// [`finish`](Self::finish) before use.
    fn accumulate(&mut self, x: &Matrix<T>, z: &[T]) {
        let p = self.dim();
        for (row, &zi) in z.iter().enumerate() {
            let xr = x.row(row);
            for a in 0..p {
                let xa = xr[a];
                if xa == T::zero() {
                    continue;
                }
                self.rhs[a] = self.rhs[a] + xa * zi;
                let g = self.gram.row_mut(a);
                for b in a..p {
                    g[b] = g[b] + xa * xr[b];
                }
            }
            self.yty = self.yty + zi * zi;
        }
    }

    fn finish(&mut self) {
        self.gram.mirror_upper();
    }

    /// System of already-whitened stacked blocks; every row counts as one
    /// observation.
    pub fn from_whitened(z: &[T], s: &Matrix<T>, r: &Matrix<T>) -> Result<Self> {
        let n = z.len();
        if s.shape() != (n, NULL_DIM) || r.rows() != n {
            return Err(Error::Dimension(format!(
                "whitened blocks: y {n}, S {:?}, R {:?}",
                s.shape(),
                r.shape()
            )));
        }
        let mut sys = Self::new(r.cols());
        let x = hstack(s, r);
        sys.accumulate(&x, z);
        sys.finish();
        sys.n_eff = T::from_usize_lossy(n);
        Ok(sys)
    }

    /// Builds the system from raw subject blocks, whitening each with
    /// `√w L⁻¹` where `V = LLᵀ`.
    pub fn from_subjects<'a, I>(n_knots: usize, subjects: I) -> Result<Self>
    where
        I: IntoIterator<Item = SubjectBlock<'a, T>>,
    {
        let mut sys = Self::new(n_knots);
        for blk in subjects {
            sys.add_subject(&blk)?;
        }
        sys.finish();
        Ok(sys)
    }

    fn add_subject(&mut self, blk: &SubjectBlock<'_, T>) -> Result<()> {
        let n = blk.y.len();
        if blk.x.shape() != (n, self.dim()) || blk.cov.dim() != n {
            return Err(Error::Dimension("subject block shapes".into()));
        }
        let x = blk.cov.whiten_matrix(blk.w, blk.x)?;
        let z = blk.cov.whiten_vector(blk.w, blk.y)?;
        self.accumulate(&x, &z);
        self.n_eff = self.n_eff + blk.w * T::from_usize_lossy(n);
        Ok(())
    }

    /// `zᵀz − 2bᵀβ + βᵀGβ + Nλ cᵀQc`, the penalized criterion at `β = (d, c)`.
    pub fn penalized_objective(&self, q: &Matrix<T>, n_lambda: T, beta: &[T]) -> T {
        let gb = self.gram.matvec(beta).expect("dimension");
        let c = &beta[NULL_DIM..];
        let qc = q.matvec(c).expect("dimension");
        self.yty - T::lit(2.0) * dot(&self.rhs, beta) + dot(beta, &gb) + n_lambda * dot(c, &qc)
    }

    /// Solves `(G + NλΩ) β = b` with `Ω = diag(0, 0, Q)`.
    pub fn solve(&self, q: &Matrix<T>, n_lambda: T) -> Result<Vec<T>> {
        let p = self.dim();
        if q.shape() != (p - NULL_DIM, p - NULL_DIM) {
            return Err(Error::Dimension("Q does not match the knot count".into()));
        }
        if !(n_lambda > T::zero()) || !n_lambda.is_finite() {
            return Err(Error::InvalidParameter("N lambda must be positive and finite".into()));
        }
        let mut h = self.gram.clone();
        for a in 0..p - NULL_DIM {
            for b in 0..p - NULL_DIM {
                h[(a + NULL_DIM, b + NULL_DIM)] = h[(a + NULL_DIM, b + NULL_DIM)] + n_lambda * q[(a, b)];
            }
        }
        let scale = equilibration(&h);
        let hs = Matrix::from_fn(p, p, |a, b| h[(a, b)] * scale[a] * scale[b]);
        let bs: Vec<T> = self.rhs.iter().zip(&scale).map(|(b, s)| *b * *s).collect();
        let chol = Cholesky::with_jitter(&hs).map_err(|_| Error::Singular("penalized spline system".into()))?;
        let mut x = chol.solve(&bs);
        for (xi, s) in x.iter_mut().zip(&scale) {
            *xi = *xi * *s;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("penalized spline solution".into()));
        }
        Ok(x)
    }

    /// Fits at a fixed `log10(Nλ)`.
    pub fn fit_at(&self, q: &Matrix<T>, n_total: usize, log10_n_lambda: T) -> Result<SplineFit<T>> {
        let n_lambda = T::lit(10.0).powf(log10_n_lambda);
        let beta = self.solve(q, n_lambda)?;
        Ok(self.package(beta, n_total, log10_n_lambda, None))
    }

    fn package(&self, beta: Vec<T>, n_total: usize, log10_n_lambda: T, gml_score: Option<T>) -> SplineFit<T> {
        SplineFit {
            d: beta[..NULL_DIM].to_vec(),
            c: beta[NULL_DIM..].to_vec(),
            lambda: T::lit(10.0).powf(log10_n_lambda) / T::from_usize_lossy(n_total),
            log10_n_lambda,
            gml_score,
        }
    }

    /// Chooses `λ` minimizing the GML criterion and returns the fit there.
    pub fn select_lambda(&self, q: &Matrix<T>, n_total: usize, search: &LambdaSearch) -> Result<SplineFit<T>> {
        search.validate()?;
        let gml = GmlProblem::new(self, q)?;
        let grid: Vec<T> = search.grid().into_iter().map(T::lit).collect();
        let scores: Vec<T> = grid.iter().map(|&x| gml.log_score(x)).collect();

        let mut best: Option<(T, T)> = None;
        let mut best_idx = 0;
        for (j, (&x, &s)) in grid.iter().zip(&scores).enumerate() {
            if !s.is_finite() {
                continue;
            }
            if better_or_tie(s, x, best) {
                best = Some((s, x));
                best_idx = j;
            }
        }
        let (mut best_score, mut best_x) =
            best.ok_or_else(|| Error::NonFinite("GML criterion at every grid point".into()))?;

        if let (Some(tol), true) = (search.tolerance_log10, grid.len() > 1) {
            let lo = grid[best_idx.saturating_sub(1)];
            let hi = grid[(best_idx + 1).min(grid.len() - 1)];
            let (x, s) = golden_section(|x| gml.log_score(x), lo, hi, T::lit(tol));
            if s.is_finite() && better_or_tie(s, x, Some((best_score, best_x))) {
                best_score = s;
                best_x = x;
            }
        }
        let beta = self.solve(q, T::lit(10.0).powf(best_x))?;
        Ok(self.package(beta, n_total, best_x, Some(best_score)))
    }
}

/// `s < best`, or equal within rounding with a larger `x`.
fn better_or_tie<T: Scalar>(s: T, x: T, best: Option<(T, T)>) -> bool {
    match best {
        None => true,
        Some((bs, bx)) => {
            let tie = T::lit(1e-12) * T::one().max(bs.abs());
            s < bs - tie || ((s - bs).abs() <= tie && x > bx)
        }
    }
}

fn golden_section<T: Scalar>(f: impl Fn(T) -> T, mut a: T, mut b: T, tol: T) -> (T, T) {
    let inv_phi = (T::lit(5.0).sqrt() - T::one()) / T::lit(2.0);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while (b - a).abs() > tol {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
    }
    let x = (a + b) / T::lit(2.0);
    (x, f(x))
}

/// The design `[S R]` of one block.
pub fn hstack<T: Scalar>(s: &Matrix<T>, r: &Matrix<T>) -> Matrix<T> {
    let (n, k) = (s.rows(), s.cols());
    Matrix::from_fn(n, k + r.cols(), |i, j| if j < k { s[(i, j)] } else { r[(i, j - k)] })
}

fn equilibration<T: Scalar>(h: &Matrix<T>) -> Vec<T> {
    (0..h.rows())
        .map(|j| {
            let d = h[(j, j)];
            if d > T::zero() {
                T::one() / d.sqrt()
            } else {
                T::one()
            }
        })
        .collect()
}

/// One subject's raw (unwhitened) contribution.
pub struct SubjectBlock<'a, T> {
    pub y: &'a [T],
    /// Design rows `[S R]`.
    pub x: &'a Matrix<T>,
    pub cov: &'a SubjectCovariance<T>,
    pub w: T,
}

/// Spectral form of the GML criterion for every `λ`.
///
/// With `G + sΩ = LLᵀ` (after diagonal equilibration) and `sL⁻¹ΩL⁻ᵀ = UωUᵀ`,
/// the hat matrix `A(λ)` of the whitened problem satisfies
/// `zᵀ(I − A)z = zᵀz − Σ u_j² / (1 − ω_j + νω_j)` and the nonzero
/// eigenvalues of `I − A` are `νω_j / (1 − ω_j + νω_j)`, where `u = UᵀL⁻¹b`
/// and `ν = Nλ / s`.
pub struct GmlProblem<T> {
    omega: Vec<T>,
    u2: Vec<T>,
    keep: Vec<bool>,
    yty: T,
    scale: T,
    n_eff: T,
}

impl<T: Scalar> GmlProblem<T> {
    pub fn new(sys: &ReducedSystem<T>, q: &Matrix<T>) -> Result<Self> {
        let p = sys.dim();
        let e = p - NULL_DIM;
        if q.shape() != (e, e) {
            return Err(Error::Dimension("Q does not match the knot count".into()));
        }
        if !(sys.n_eff > T::lit(NULL_DIM as f64)) {
            return Err(Error::InvalidParameter(format!(
                "GML needs more than {NULL_DIM} effective observations, got {}",
                sys.n_eff.to_f64_lossy()
            )));
        }
        let tr_g: T = (NULL_DIM..p).map(|j| sys.gram[(j, j)]).sum();
        let tr_q = q.trace();
        let s = if tr_g > T::zero() && tr_q > T::zero() { tr_g / tr_q } else { T::one() };

        let mut m0 = sys.gram.clone();
        for a in 0..e {
            for b in 0..e {
                m0[(a + NULL_DIM, b + NULL_DIM)] = m0[(a + NULL_DIM, b + NULL_DIM)] + s * q[(a, b)];
            }
        }
        let d = equilibration(&m0);
        let m0 = Matrix::from_fn(p, p, |a, b| m0[(a, b)] * d[a] * d[b]);
        let chol = Cholesky::with_jitter(&m0).map_err(|_| Error::Singular("GML reference matrix".into()))?;
        let omega_d = Matrix::from_fn(p, p, |a, b| {
            if a < NULL_DIM || b < NULL_DIM {
                T::zero()
            } else {
                s * q[(a - NULL_DIM, b - NULL_DIM)] * d[a] * d[b]
            }
        });
        // sL⁻¹ΩL⁻ᵀ: two triangular solves on the symmetric matrix.
        let half = chol.solve_lower_matrix(&omega_d);
        let mut b_mat = chol.solve_lower_matrix(&half.transpose());
        b_mat.mirror_upper();
        let eig = SymmetricEigen::new(&b_mat)?;

        let mut lb: Vec<T> = sys.rhs.iter().zip(&d).map(|(b, di)| *b * *di).collect();
        chol.solve_lower_in_place(&mut lb);
        let u2: Vec<T> = (0..p)
            .map(|j| {
                let uj: T = (0..p).map(|i| eig.vectors[(i, j)] * lb[i]).sum();
                uj * uj
            })
            .collect();

        let omega: Vec<T> = eig.values.iter().map(|w| w.max(T::zero()).min(T::one())).collect();
        let w_max = omega.iter().fold(T::zero(), |a, &b| a.max(b));
        let keep: Vec<bool> = omega
            .iter()
            .enumerate()
            .map(|(j, &w)| j >= NULL_DIM && w > T::lit(1e-12) * w_max)
            .collect();
        Ok(Self {
            omega,
            u2,
            keep,
            yty: sys.yty,
            scale: s,
            n_eff: sys.n_eff,
        })
    }

    /// `zᵀ(I − A(λ))z` at `log10(Nλ)`.
    pub fn weighted_rss(&self, log10_n_lambda: T) -> T {
        let nu = T::lit(10.0).powf(log10_n_lambda) / self.scale;
        let fitted: T = self
            .omega
            .iter()
            .zip(&self.u2)
            .map(|(&w, &u2)| u2 / (T::one() - w + nu * w))
            .sum();
        (self.yty - fitted).max(T::lit(1e-300).max(T::min_positive_value()))
    }

    /// `log det⁺(I − A(λ))`.
    pub fn log_det_plus(&self, log10_n_lambda: T) -> T {
        let nu = T::lit(10.0).powf(log10_n_lambda) / self.scale;
        self.omega
            .iter()
            .zip(&self.keep)
            .filter(|(_, &k)| k)
            .map(|(&w, _)| (nu * w).ln() - (T::one() - w + nu * w).ln())
            .sum()
    }

    /// Effective degrees of freedom `tr A(λ)`.
    pub fn effective_df(&self, log10_n_lambda: T) -> T {
        let nu = T::lit(10.0).powf(log10_n_lambda) / self.scale;
        let penalized: T = self
            .omega
            .iter()
            .zip(&self.keep)
            .filter(|(_, &k)| k)
            .map(|(&w, _)| (T::one() - w) / (T::one() - w + nu * w))
            .sum();
        T::lit(NULL_DIM as f64) + penalized
    }

    /// `log M(λ) = log zᵀ(I−A)z − log det⁺(I−A) / (n − 2)`, with `n` the
    /// effective number of observations.
    pub fn log_score(&self, log10_n_lambda: T) -> T {
        let denom = self.n_eff - T::lit(NULL_DIM as f64);
        self.weighted_rss(log10_n_lambda).ln() - self.log_det_plus(log10_n_lambda) / denom
    }
}

/// Solves the penalized system for stacked whitened blocks.
pub fn solve_penalized<T: Scalar>(
    y_tilde: &[T],
    s_tilde: &Matrix<T>,
    r_tilde: &Matrix<T>,
    q: &Matrix<T>,
    n_total: usize,
    lambda: T,
) -> Result<(Vec<T>, Vec<T>)> {
    let sys = ReducedSystem::from_whitened(y_tilde, s_tilde, r_tilde)?;
    let beta = sys.solve(q, T::from_usize_lossy(n_total) * lambda)?;
    Ok((beta[..NULL_DIM].to_vec(), beta[NULL_DIM..].to_vec()))
}

/// GML selection of `λ` for stacked whitened blocks.
pub fn select_lambda_gml<T: Scalar>(
    y_tilde: &[T],
    s_tilde: &Matrix<T>,
    r_tilde: &Matrix<T>,
    q: &Matrix<T>,
    n_total: usize,
    search: &LambdaSearch,
) -> Result<SplineFit<T>> {
    ReducedSystem::from_whitened(y_tilde, s_tilde, r_tilde)?.select_lambda(q, n_total, search)
}
