//! Weighted L1-penalized logistic regression for the group-membership model.
//!
//! Maximizes `Σ_i [w_i η_i − log(1 + e^{η_i})] − λ0 Σ_j |b_j|` where `b` are the
//! coefficients of the internally standardized covariates (mean 0, unit
//! population variance) and the intercept is unpenalized. Coefficients are
//! mapped back to the original covariate scale on output.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Logistic coefficients on the original covariate scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub beta0: f64,
    pub beta1: Vec<f64>,
    pub lambda0: f64,
}

impl LogisticParams {
    pub fn zeros(p: usize) -> Self {
        Self { beta0: 0.0, beta1: vec![0.0; p], lambda0: 0.0 }
    }

    #[inline]
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.beta0 + x.iter().zip(&self.beta1).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Indices of nonzero covariate coefficients.
    pub fn support(&self) -> Vec<usize> {
        self.beta1.iter().enumerate().filter(|(_, b)| **b != 0.0).map(|(j, _)| j).collect()
    }
}

/// Overflow-safe logistic function.
#[inline]
pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^η)` without overflow.
#[inline]
pub fn log1p_exp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Prior probability of group 1 for covariates `x`.
pub fn predict_prior(params: &LogisticParams, x: &[f64]) -> f64 {
    sigmoid(params.linear_predictor(x))
}

/// Weighted Bernoulli log-likelihood `Σ w η − log(1 + e^η)`.
pub fn log_likelihood(params: &LogisticParams, x: &Matrix<f64>, w: &[f64]) -> f64 {
    (0..x.rows())
        .map(|i| {
            let eta = params.linear_predictor(x.row(i));
            w[i] * eta - log1p_exp(eta)
        })
        .sum()
}

/// `Σ_j sd_j |β_j|`: the L1 norm of the coefficients on the standardized
/// scale, with `sd` the population standard deviation of column `j`.
pub fn standardized_l1(params: &LogisticParams, x: &Matrix<f64>) -> Result<f64> {
    if params.beta1.len() != x.cols() {
        return Err(Error::Dimension("coefficients vs covariate columns".into()));
    }
    let xs = Standardized::new(x)?;
    Ok(params.beta1.iter().zip(&xs.sd).map(|(b, s)| (b * s).abs()).sum())
}

/// `log_likelihood − λ0 · standardized_l1`, the criterion the solver maximizes.
pub fn penalized_log_likelihood(params: &LogisticParams, x: &Matrix<f64>, w: &[f64], lambda0: f64) -> Result<f64> {
    Ok(log_likelihood(params, x, w) - lambda0 * standardized_l1(params, x)?)
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoOptions {
    pub kkt_tolerance: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Bound on standardized coefficient magnitudes (guards against separation).
    pub coefficient_cap: f64,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self { kkt_tolerance: 1e-7, max_outer: 100, max_inner: 2000, coefficient_cap: 30.0 }
    }
}

const INTERCEPT_CAP: f64 = 100.0;
const PROB_CLAMP: f64 = 1e-10;

/// Column-standardized design.
#[derive(Debug, Clone)]
pub struct Standardized {
    /// Column-major standardized columns; constant columns are all zero.
    cols: Vec<Vec<f64>>,
    mean: Vec<f64>,
    sd: Vec<f64>,
    m: usize,
}

impl Standardized {
    pub fn new(x: &Matrix<f64>) -> Result<Self> {
        if !x.all_finite() {
            return Err(Error::NonFinite("logistic design".into()));
        }
        let (m, p) = x.shape();
        if m == 0 {
            return Err(Error::InvalidParameter("no subjects".into()));
        }
        let mut cols = Vec::with_capacity(p);
        let mut mean = Vec::with_capacity(p);
        let mut sd = Vec::with_capacity(p);
        for j in 0..p {
            let col = x.column(j);
            let mu = col.iter().sum::<f64>() / m as f64;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let s = var.sqrt();
            let scale = s.max(1e-300);
            let constant = s <= 1e-12 * (1.0 + mu.abs());
            cols.push(if constant {
                vec![0.0; m]
            } else {
                col.iter().map(|v| (v - mu) / scale).collect()
            });
            mean.push(mu);
            sd.push(if constant { 0.0 } else { s });
        }
        Ok(Self { cols, mean, sd, m })
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        // Re-standardize on the subset so fold fits match stand-alone fits.
        let mut x = Matrix::zeros(rows.len(), self.cols.len());
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..self.cols.len() {
                x[(r, j)] = self.original(i, j);
            }
        }
        Self::new(&x).expect("subset of a finite design")
    }

    fn original(&self, i: usize, j: usize) -> f64 {
        if self.sd[j] == 0.0 {
            self.mean[j]
        } else {
            self.cols[j][i] * self.sd[j] + self.mean[j]
        }
    }

    fn to_original(&self, b0: f64, b: &[f64], lambda0: f64) -> LogisticParams {
        let mut beta0 = b0;
        let beta1 = b
            .iter()
            .enumerate()
            .map(|(j, &bj)| {
                if bj == 0.0 || self.sd[j] == 0.0 {
                    0.0
                } else {
                    beta0 -= bj * self.mean[j] / self.sd[j];
                    bj / self.sd[j]
                }
            })
            .collect();
        LogisticParams { beta0, beta1, lambda0 }
    }

    fn from_original(&self, params: &LogisticParams) -> (f64, Vec<f64>) {
        let b: Vec<f64> = params.beta1.iter().zip(&self.sd).map(|(v, s)| v * s).collect();
        let b0 = params.beta0 + params.beta1.iter().zip(&self.mean).map(|(v, mu)| v * mu).sum::<f64>();
        (b0, b)
    }
}

/// Fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub params: LogisticParams,
    /// Penalized objective on the standardized scale.
    pub objective: f64,
    pub outer_iterations: usize,
    /// Penalized objective after each accepted outer iteration.
    pub objective_trace: Vec<f64>,
}

struct Problem<'a> {
    xs: &'a Standardized,
    w: &'a [f64],
    lambda0: f64,
    opts: &'a LassoOptions,
}

impl Problem<'_> {
    fn eta(&self, b0: f64, b: &[f64]) -> Vec<f64> {
        let mut eta = vec![b0; self.xs.m];
        for (j, &bj) in b.iter().enumerate() {
            if bj != 0.0 {
                for (e, x) in eta.iter_mut().zip(&self.xs.cols[j]) {
                    *e += bj * x;
                }
            }
        }
        eta
    }

    fn objective(&self, b0: f64, b: &[f64]) -> f64 {
        let eta = self.eta(b0, b);
        let ll: f64 = eta.iter().zip(self.w).map(|(e, w)| w * e - log1p_exp(*e)).sum();
        ll - self.lambda0 * b.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Largest violation of the optimality conditions.
    fn kkt_violation(&self, b0: f64, b: &[f64]) -> f64 {
        let eta = self.eta(b0, b);
        let resid: Vec<f64> = eta.iter().zip(self.w).map(|(e, w)| w - sigmoid(*e)).collect();
        let mut worst = resid.iter().sum::<f64>().abs();
        if b0.abs() >= INTERCEPT_CAP {
            worst = 0.0;
        }
        for (j, &bj) in b.iter().enumerate() {
            if self.xs.sd[j] == 0.0 {
                continue;
            }
            let g: f64 = self.xs.cols[j].iter().zip(&resid).map(|(x, r)| x * r).sum();
            let v = if bj == 0.0 {
                (g.abs() - self.lambda0).max(0.0)
            } else if bj.abs() >= self.opts.coefficient_cap {
                // at the cap only an inward pull is a violation
                (-(g - self.lambda0 * bj.signum()) * bj.signum()).max(0.0)
            } else {
                (g - self.lambda0 * bj.signum()).abs()
            };
            worst = worst.max(v);
        }
        worst
    }

    /// Coordinate descent on the penalized quadratic approximation at `(b0, b)`.
    fn newton_target(&self, b0: f64, b: &[f64]) -> (f64, Vec<f64>) {
        let m = self.xs.m;
        let eta = self.eta(b0, b);
        let mut v = vec![0.0; m];
        let mut r = vec![0.0; m];
        for i in 0..m {
            let p = sigmoid(eta[i]).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            v[i] = p * (1.0 - p);
            // working residual z − η
            r[i] = (self.w[i] - sigmoid(eta[i])) / v[i];
        }
        let v_sum: f64 = v.iter().sum();
        let h: Vec<f64> = self
            .xs
            .cols
            .iter()
            .map(|c| c.iter().zip(&v).map(|(x, vi)| vi * x * x).sum())
            .collect();
        let cap = self.opts.coefficient_cap;
        let mut nb0 = b0;
        let mut nb = b.to_vec();
        for _ in 0..self.opts.max_inner {
            let mut max_change: f64 = 0.0;
            let d0 = (r.iter().zip(&v).map(|(ri, vi)| vi * ri).sum::<f64>() / v_sum)
                .clamp(-INTERCEPT_CAP - nb0, INTERCEPT_CAP - nb0);
            if d0 != 0.0 {
                nb0 += d0;
                r.iter_mut().for_each(|ri| *ri -= d0);
                max_change = max_change.max(d0.abs() * v_sum.sqrt());
            }
            for j in 0..nb.len() {
                if h[j] <= 0.0 {
                    continue;
                }
                let col = &self.xs.cols[j];
                let g: f64 = col.iter().zip(&r).zip(&v).map(|((x, ri), vi)| vi * x * ri).sum();
                let u = g + h[j] * nb[j];
                let new = (soft_threshold(u, self.lambda0) / h[j]).clamp(-cap, cap);
                let d = new - nb[j];
                if d != 0.0 {
                    nb[j] = new;
                    for (ri, x) in r.iter_mut().zip(col) {
                        *ri -= d * x;
                    }
                    max_change = max_change.max(d.abs() * h[j].sqrt());
                }
            }
            if max_change < 1e-12 {
                break;
            }
        }
        self.refine_on_support(b0, b, &eta, &v, nb0, nb)
    }

    /// Exact maximizer of the quadratic model with the support and signs of
    /// the coordinate-descent result held fixed. Coordinate descent alone
    /// converges slowly when near-saturated probabilities make the weighted
    /// Gram ill-conditioned. Falls back to `(nb0, nb)` if the exact solution
    /// changes a sign or leaves the box.
    fn refine_on_support(&self, b0: f64, b: &[f64], eta: &[f64], v: &[f64], nb0: f64, nb: Vec<f64>) -> (f64, Vec<f64>) {
        let active: Vec<usize> = (0..nb.len()).filter(|&j| nb[j] != 0.0 && self.xs.sd[j] != 0.0).collect();
        let k = active.len() + 1;
        let col = |a: usize, i: usize| if a == 0 { 1.0 } else { self.xs.cols[active[a - 1]][i] };
        // gradient of the log-likelihood at the expansion point plus the
        // pull of dropped coordinates back to zero
        let resid: Vec<f64> = eta.iter().zip(self.w).map(|(e, w)| w - sigmoid(*e)).collect();
        let mut shift = vec![0.0; self.xs.m];
        for (j, &bj) in b.iter().enumerate() {
            if bj != 0.0 && nb[j] == 0.0 {
                for (s, x) in shift.iter_mut().zip(&self.xs.cols[j]) {
                    *s -= bj * x;
                }
            }
        }
        let mut h = Matrix::zeros(k, k);
        let mut rhs = vec![0.0; k];
        for i in 0..self.xs.m {
            for a in 0..k {
                let xa = col(a, i);
                rhs[a] += xa * (resid[i] - v[i] * shift[i]);
                for c in a..k {
                    h[(a, c)] += v[i] * xa * col(c, i);
                }
            }
        }
        h.mirror_upper();
        for (a, &j) in active.iter().enumerate() {
            rhs[a + 1] -= self.lambda0 * nb[j].signum();
        }
        let Ok(chol) = crate::linalg::Cholesky::new(&h) else {
            return (nb0, nb);
        };
        let step = chol.solve(&rhs);
        let t0 = b0 + step[0];
        let mut t = vec![0.0; nb.len()];
        for (a, &j) in active.iter().enumerate() {
            t[j] = b[j] + step[a + 1];
        }
        let consistent = t0.abs() <= INTERCEPT_CAP
            && step.iter().all(|s| s.is_finite())
            && active.iter().all(|&j| t[j].signum() == nb[j].signum() && t[j].abs() <= self.opts.coefficient_cap);
        if consistent {
            (t0, t)
        } else {
            (nb0, nb)
        }
    }

    fn solve(&self, start: (f64, Vec<f64>)) -> Result<LassoFit> {
        let (mut b0, mut b) = start;
        let mut f = self.objective(b0, &b);
        let mut trace = vec![f];
        let mut iterations = 0;
        // objective evaluation noise; smaller decreases are not real
        let rounding = 64.0 * f64::EPSILON * (f.abs() + self.xs.m as f64);
        while self.kkt_violation(b0, &b) > self.opts.kkt_tolerance {
            if iterations >= self.opts.max_outer {
                return Err(Error::NoConvergence(format!(
                    "lasso-logistic: KKT violation {:.3e} after {} iterations",
                    self.kkt_violation(b0, &b),
                    iterations
                )));
            }
            iterations += 1;
            let (t0, t) = self.newton_target(b0, &b);
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let c0 = b0 + step * (t0 - b0);
                let c: Vec<f64> = b.iter().zip(&t).map(|(a, z)| a + step * (z - a)).collect();
                let fc = self.objective(c0, &c);
                if fc >= f - rounding {
                    b0 = c0;
                    b = c;
                    f = fc;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            trace.push(f);
            if !accepted {
                // no ascent possible at machine precision
                break;
            }
        }
        Ok(LassoFit {
            params: self.xs.to_original(b0, &b, self.lambda0),
            objective: f,
            outer_iterations: iterations,
            objective_trace: trace,
        })
    }
}

#[inline]
fn soft_threshold(u: f64, t: f64) -> f64 {
    if u > t {
        u - t
    } else if u < -t {
        u + t
    } else {
        0.0
    }
}

fn check_responses(x: &Matrix<f64>, w: &[f64], lambda0: f64) -> Result<()> {
    if w.len() != x.rows() {
        return Err(Error::Dimension(format!("{} responses for {} rows", w.len(), x.rows())));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::InvalidParameter("responses must lie in [0, 1]".into()));
    }
    if !(lambda0 >= 0.0) || !lambda0.is_finite() {
        return Err(Error::InvalidParameter("lambda0 must be finite and >= 0".into()));
    }
    Ok(())
}

/// Maximizes the penalized weighted log-likelihood at a fixed `λ0`.
pub fn fit_weighted_lasso(x: &Matrix<f64>, w: &[f64], lambda0: f64) -> Result<LogisticParams> {
    Ok(fit_weighted_lasso_with(x, w, lambda0, None, &LassoOptions::default())?.params)
}

/// As [`fit_weighted_lasso`] with a warm start and explicit options.
pub fn fit_weighted_lasso_with(
    x: &Matrix<f64>,
    w: &[f64],
    lambda0: f64,
    warm: Option<&LogisticParams>,
    opts: &LassoOptions,
) -> Result<LassoFit> {
    check_responses(x, w, lambda0)?;
    let xs = Standardized::new(x)?;
    fit_standardized(&xs, w, lambda0, warm.map(|p| xs.from_original(p)), opts)
}

fn fit_standardized(
    xs: &Standardized,
    w: &[f64],
    lambda0: f64,
    start: Option<(f64, Vec<f64>)>,
    opts: &LassoOptions,
) -> Result<LassoFit> {
    let p = xs.cols.len();
    let start = start.unwrap_or_else(|| (null_intercept(w), vec![0.0; p]));
    let start = (start.0.clamp(-INTERCEPT_CAP, INTERCEPT_CAP), start.1.iter().map(|v| v.clamp(-opts.coefficient_cap, opts.coefficient_cap)).collect());
    Problem { xs, w, lambda0, opts }.solve(start)
}

fn null_intercept(w: &[f64]) -> f64 {
    let mean = w.iter().sum::<f64>() / w.len().max(1) as f64;
    let mean = mean.clamp(1e-12, 1.0 - 1e-12);
    (mean / (1.0 - mean)).ln()
}

/// Smallest `λ0` at which every covariate coefficient is zero.
pub fn lambda_max(x: &Matrix<f64>, w: &[f64]) -> Result<f64> {
    let xs = Standardized::new(x)?;
    Ok(lambda_max_std(&xs, w))
}

fn lambda_max_std(xs: &Standardized, w: &[f64]) -> f64 {
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    xs.cols
        .iter()
        .map(|c| c.iter().zip(w).map(|(x, wi)| x * (wi - mean)).sum::<f64>().abs())
        .fold(0.0, f64::max)
}

/// Cross-validation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvOptions {
    pub n_folds: usize,
    pub grid_len: usize,
    /// Smallest grid value as a fraction of `λ_max`.
    pub min_ratio: f64,
    pub seed: u64,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { n_folds: 10, grid_len: 50, min_ratio: 1e-3, seed: 0 }
    }
}

/// Descending log-spaced grid from `λ_max` to `min_ratio · λ_max`.
pub fn lambda_grid(lambda_max: f64, len: usize, min_ratio: f64) -> Vec<f64> {
    let top = lambda_max.max(1e-8);
    if len <= 1 {
        return vec![top];
    }
    let (lo, hi) = ((top * min_ratio).ln(), top.ln());
    (0..len).map(|k| (hi + (lo - hi) * k as f64 / (len - 1) as f64).exp()).collect()
}

/// Fold index for each subject. Subjects are ranked by a seeded hash of
/// their id and dealt round-robin, so the partition does not depend on the
/// order subjects appear in.
pub fn fold_assignment<S: AsRef<str>>(ids: &[S], n_folds: usize, seed: u64) -> Vec<usize> {
    let mut keyed: Vec<(u64, usize)> = ids.iter().enumerate().map(|(i, id)| (subject_hash(id.as_ref(), seed), i)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| ids[a.1].as_ref().cmp(ids[b.1].as_ref())));
    let mut folds = vec![0; ids.len()];
    for (rank, (_, i)) in keyed.into_iter().enumerate() {
        folds[i] = rank % n_folds.max(1);
    }
    folds
}

/// Deterministic 64-bit hash of `(seed, id)`.
pub fn subject_hash(id: &str, seed: u64) -> u64 {
    let mut h = DefaultHasher::new();
    seed.hash(&mut h);
    id.hash(&mut h);
    h.finish()
}

/// Result of cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda0: f64,
    pub grid: Vec<f64>,
    /// Mean held-out log-likelihood per subject at each grid value.
    pub mean_loglik: Vec<f64>,
}

/// Selects `λ0` from `grid` by K-fold cross-validation of the held-out
/// weighted log-likelihood. `folds[i]` is subject `i`'s fold.
pub fn cross_validate_lambda0(x: &Matrix<f64>, w: &[f64], folds: &[usize], grid: &[f64]) -> Result<CvResult> {
    check_responses(x, w, 0.0)?;
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty lambda0 grid".into()));
    }
    if grid.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter("lambda0 grid values must be finite and >= 0".into()));
    }
    if folds.len() != x.rows() {
        return Err(Error::Dimension("fold vector length".into()));
    }
    if grid.len() == 1 {
        return Ok(CvResult { lambda0: grid[0], grid: grid.to_vec(), mean_loglik: vec![f64::NAN] });
    }
    let n_folds = folds.iter().copied().max().map_or(0, |k| k + 1);
    if n_folds < 2 {
        return Err(Error::InvalidParameter("cross-validation needs at least 2 folds".into()));
    }
    let m = x.rows();
    // descending order gives sparse-to-dense warm starts
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));

    let per_fold: Vec<Result<Vec<f64>>> = (0..n_folds)
        .into_par_iter()
        .map(|k| {
            let train: Vec<usize> = (0..m).filter(|&i| folds[i] != k).collect();
            let test: Vec<usize> = (0..m).filter(|&i| folds[i] == k).collect();
            let xt = Matrix::from_fn(train.len(), x.cols(), |r, j| x[(train[r], j)]);
            let wt: Vec<f64> = train.iter().map(|&i| w[i]).collect();
            let xs = Standardized::new(&xt)?;
            let scale = train.len() as f64 / m as f64;
            let opts = LassoOptions::default();
            let mut out = vec![0.0; grid.len()];
            let mut start: Option<(f64, Vec<f64>)> = None;
            for &g in &order {
                let fit = fit_standardized(&xs, &wt, grid[g] * scale, start.take(), &opts)?;
                out[g] = test
                    .iter()
                    .map(|&i| {
                        let eta = fit.params.linear_predictor(x.row(i));
                        w[i] * eta - log1p_exp(eta)
                    })
                    .sum();
                start = Some(xs.from_original(&fit.params));
            }
            Ok(out)
        })
        .collect();

    let mut total = vec![0.0; grid.len()];
    for fold in per_fold {
        for (t, v) in total.iter_mut().zip(fold?) {
            *t += v;
        }
    }
    let mean_loglik: Vec<f64> = total.iter().map(|t| t / m as f64).collect();
    let mut best = 0;
    for j in 1..grid.len() {
        let tie = 1e-12 * mean_loglik[best].abs().max(1.0);
        if mean_loglik[j] > mean_loglik[best] + tie
            || ((mean_loglik[j] - mean_loglik[best]).abs() <= tie && grid[j] > grid[best])
        {
            best = j;
        }
    }
    if !mean_loglik[best].is_finite() {
        return Err(Error::NonFinite("cross-validated log-likelihood".into()));
    }
    Ok(CvResult { lambda0: grid[best], grid: grid.to_vec(), mean_loglik })
}

/// Full CV pipeline: builds the default grid, selects `λ0`, and refits on all
/// subjects.
pub fn select_and_fit<S: AsRef<str>>(
    x: &Matrix<f64>,
    w: &[f64],
    ids: &[S],
    cv: &CvOptions,
    warm: Option<&LogisticParams>,
) -> Result<(LassoFit, CvResult)> {
    check_responses(x, w, 0.0)?;
    let m = x.rows();
    if m < cv.n_folds {
        return Err(Error::InvalidParameter(format!("{m} subjects for {} folds", cv.n_folds)));
    }
    let grid = lambda_grid(lambda_max(x, w)?, cv.grid_len, cv.min_ratio);
    let folds = fold_assignment(ids, cv.n_folds, cv.seed);
    let result = cross_validate_lambda0(x, w, &folds, &grid)?;
    let fit = fit_weighted_lasso_with(x, w, result.lambda0, warm, &LassoOptions::default())?;
    Ok((fit, result))
}
