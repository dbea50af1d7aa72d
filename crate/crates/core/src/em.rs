//! Penalized EM for the two-group mixture: random initialization, E-step,
//! the two-part M-step with its inner spline/variance alternation, stopping
//! rules, canonical labeling and the unpenalized refit on the selected
//! covariates.
//!
//! Each outer iteration selects `λ0` (cross-validation) and `λ1, λ2` (GML, on
//! the first inner pass) once and keeps them fixed for the rest of the
//! iteration, so every update in the M-step improves one fixed penalized
//! objective.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::BootstrapResult;
use crate::config::FitConfig;
use crate::covariance::{GroupTransform, SubjectCovariance, TransformedVarianceVector, VarianceComponents, WEIGHT_FLOOR};
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::kernel::{build_basis, SplineBasis};
use crate::lasso::{self, log1p_exp, predict_prior, LogisticParams};
use crate::linalg::Matrix;
use crate::spline::{evaluate_f, hstack, ReducedSystem, SplineFit, SubjectBlock, NULL_DIM};
use crate::variance::{leading_group, optimize_variances, SubjectTimes, VarianceProblem};

/// Per-subject quantities shared by every step of a fit.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub ids: Vec<String>,
    pub covariate_names: Vec<String>,
    /// `m × p` covariates of the membership model.
    pub x: Matrix<f64>,
    pub y: Vec<Vec<f64>>,
    pub times: Vec<SubjectTimes>,
    /// Spline design rows `[S R]` of each subject.
    pub designs: Vec<Matrix<f64>>,
    /// Designs and responses in each subject's kernel eigenbasis.
    designs_rot: Vec<Matrix<f64>>,
    y_rot: Vec<Vec<f64>>,
    pub q: Matrix<f64>,
    pub knots: Vec<f64>,
    pub n_total: usize,
    pub scaling: (f64, f64),
}

impl Workspace {
    pub fn new(dataset: &LongitudinalDataset, basis: &SplineBasis<f64>) -> Result<Self> {
        if basis.n_obs() != dataset.total_obs {
            return Err(Error::Dimension(format!(
                "basis has {} rows for {} observations",
                basis.n_obs(),
                dataset.total_obs
            )));
        }
        let m = dataset.n_subjects();
        let p = dataset.n_covariates();
        let offsets = dataset.offsets();
        let designs: Vec<Matrix<f64>> = dataset
            .subjects
            .iter()
            .zip(&offsets)
            .map(|(s, &o)| hstack(&basis.s.row_block(o, s.n_obs()), &basis.r.row_block(o, s.n_obs())))
            .collect();
        let times: Vec<SubjectTimes> = dataset.subjects.par_iter().map(|s| SubjectTimes::new(s.times_scaled.clone())).collect::<Result<_>>()?;
        let designs_rot = times.par_iter().zip(&designs).map(|(s, x)| s.rotate_matrix(x)).collect::<Result<_>>()?;
        let y: Vec<Vec<f64>> = dataset.subjects.iter().map(|s| s.responses.clone()).collect();
        let y_rot = times.par_iter().zip(&y).map(|(s, y)| s.rotate(y)).collect::<Result<_>>()?;
        Ok(Self {
            ids: dataset.subjects.iter().map(|s| s.subject_id.clone()).collect(),
            covariate_names: dataset.covariate_names.clone(),
            x: Matrix::from_fn(m, p, |i, j| dataset.subjects[i].covariates[j]),
            y,
            times,
            designs,
            designs_rot,
            y_rot,
            q: basis.q.clone(),
            knots: basis.knots.clone(),
            n_total: dataset.total_obs,
            scaling: dataset.scaling,
        })
    }

    /// Builds the spline basis with at most `knot_cap` knots, then the workspace.
    pub fn from_dataset(dataset: &LongitudinalDataset, knot_cap: usize) -> Result<Self> {
        Self::new(dataset, &build_basis(dataset, knot_cap)?)
    }

    /// Workspace of `dataset` on the time scaling and knots of a fit.
    pub fn for_report(report: &FitReport, dataset: &LongitudinalDataset) -> Result<Self> {
        let dataset = dataset.with_scaling(report.scaling)?;
        Self::new(&dataset, &SplineBasis::with_knots(&dataset.stacked_times(), report.knots.clone()))
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn n_knots(&self) -> usize {
        self.knots.len()
    }

    /// Copy whose membership model only sees the covariate columns in `support`.
    pub fn restrict(&self, support: &[usize]) -> Result<Self> {
        if let Some(&bad) = support.iter().find(|&&j| j >= self.x.cols()) {
            return Err(Error::Dimension(format!("covariate index {bad} out of range")));
        }
        let mut out = self.clone();
        out.x = Matrix::from_fn(self.m(), support.len(), |i, j| self.x[(i, support[j])]);
        out.covariate_names = support.iter().map(|&j| self.covariate_names[j].clone()).collect();
        Ok(out)
    }

    /// Copy with new responses on the same time grids.
    pub fn with_responses(&self, y: Vec<Vec<f64>>) -> Result<Self> {
        if y.len() != self.m() || y.iter().zip(&self.y).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Dimension("response blocks vs subjects".into()));
        }
        if y.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("responses".into()));
        }
        let y_rot = self.times.par_iter().zip(&y).map(|(s, y)| s.rotate(y)).collect::<Result<_>>()?;
        Ok(Self { y, y_rot, ..self.clone() })
    }

    /// `f(t_i)` of one subject under `fit`.
    pub fn fitted(&self, i: usize, fit: &SplineFit<f64>) -> Vec<f64> {
        let beta = fit.coefficients();
        self.designs[i].matvec(&beta).expect("design matches coefficients")
    }

    fn residual(&self, i: usize, fit: &SplineFit<f64>) -> Vec<f64> {
        self.y[i].iter().zip(self.fitted(i, fit)).map(|(y, f)| y - f).collect()
    }

    /// `Pᵀ(y_i − X_i β)` in the subject's kernel eigenbasis.
    fn rotated_residual(&self, i: usize, beta: &[f64]) -> Vec<f64> {
        let fitted = self.designs_rot[i].matvec(beta).expect("design matches coefficients");
        self.y_rot[i].iter().zip(fitted).map(|(y, f)| y - f).collect()
    }

    /// Weighted normal equations `Σ_i w_i X_iᵀV_ik⁻¹X_i` (and the matching
    /// right-hand side) of group `k`, formed in each subject's kernel
    /// eigenbasis. Subjects are summed in fixed chunks so the result does not
    /// depend on the thread count.
    pub fn spectral_system(&self, variances: &TransformedVarianceVector<f64>, k: usize, weights: &[f64]) -> Result<ReducedSystem<f64>> {
        if weights.len() != self.m() {
            return Err(Error::Dimension("one weight per subject".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= WEIGHT_FLOOR && **w <= 1.0 + 1e-12)) {
            return Err(Error::InvalidParameter(format!("weight {w} outside [{WEIGHT_FLOOR}, 1]")));
        }
        let sigma2 = variances.log_sigma2.exp();
        let ratio = variances.relative()[k].to_components();
        let p = NULL_DIM + self.n_knots();
        let subjects: Vec<usize> = (0..self.m()).collect();
        let partial: Vec<ReducedSystem<f64>> = subjects
            .par_chunks(ASSEMBLY_CHUNK)
            .map(|chunk| {
                let mut sys = ReducedSystem::new(self.n_knots());
                for &i in chunk {
                    self.add_spectral(&mut sys, i, &ratio, weights[i] / sigma2, p);
                    sys.n_eff += weights[i] * self.y[i].len() as f64;
                }
                sys
            })
            .collect();
        let mut total = ReducedSystem::new(self.n_knots());
        for part in partial {
            total.gram.add_assign_scaled(&part.gram, 1.0)?;
            for (a, b) in total.rhs.iter_mut().zip(&part.rhs) {
                *a += b;
            }
            total.yty += part.yty;
            total.n_eff += part.n_eff;
        }
        total.gram.mirror_upper();
        Ok(total)
    }

    /// Upper triangle of `scale · X̃ᵀV*⁻¹X̃` and the matching `rhs`/`yty`
    /// terms for subject `i`.
    fn add_spectral(&self, sys: &mut ReducedSystem<f64>, i: usize, ratio: &VarianceComponents<f64>, scale: f64, p: usize) {
        let s = &self.times[i];
        let inv = s.spectral_inverse(ratio);
        let (u1, ut) = s.rotated_fixed_effects();
        let x = &self.designs_rot[i];
        let y = &self.y_rot[i];
        let mut b = [vec![0.0; p], vec![0.0; p]];
        let mut h = [0.0; 2];
        let mut rz = 0.0;
        for j in 0..y.len() {
            let row = x.row(j);
            let od = inv.inv_d[j];
            let (c1, c2) = (u1[j] * od, ut[j] * od);
            let ys = y[j] * od;
            h[0] += c1 * y[j];
            h[1] += c2 * y[j];
            rz += ys * y[j];
            for a in 0..p {
                let xa = row[a];
                b[0][a] += c1 * xa;
                b[1][a] += c2 * xa;
                sys.rhs[a] += scale * xa * ys;
                let xs = scale * od * xa;
                let g = sys.gram.row_mut(a);
                for (gv, xv) in g[a..].iter_mut().zip(&row[a..]) {
                    *gv += xs * xv;
                }
            }
        }
        let mh = inv.apply_m(h);
        let [m11, m12, m22] = inv.m;
        for a in 0..p {
            let mb = [m11 * b[0][a] + m12 * b[1][a], m12 * b[0][a] + m22 * b[1][a]];
            sys.rhs[a] -= scale * (b[0][a] * mh[0] + b[1][a] * mh[1]);
            let g = sys.gram.row_mut(a);
            for c in a..p {
                g[c] -= scale * (mb[0] * b[0][c] + mb[1] * b[1][c]);
            }
        }
        sys.yty += scale * (rz - (h[0] * mh[0] + h[1] * mh[1]));
    }
}

/// Subjects per partial sum of [`Workspace::spectral_system`].
const ASSEMBLY_CHUNK: usize = 16;

/// One row of the iteration trace. Outer rows carry the relative change
/// `d_EM` and the observed-data penalized log-likelihood before and after the
/// iteration, both evaluated at that iteration's smoothing parameters; inner
/// rows carry `d_inner`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub outer: usize,
    pub inner: Option<usize>,
    pub distance: f64,
    pub loglik_before: Option<f64>,
    pub loglik_after: Option<f64>,
}

/// Complete parameter and posterior state of the mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureState {
    pub logistic: LogisticParams,
    pub group_fits: [SplineFit<f64>; 2],
    pub variances: TransformedVarianceVector<f64>,
    /// Posterior membership probabilities `w_ik`.
    pub weights: Vec<[f64; 2]>,
    /// Prior probabilities `p_i1` from the logistic model.
    pub priors: Vec<f64>,
    pub outer_iter: usize,
    pub inner_iter: usize,
    pub trace: Vec<TraceEntry>,
}

impl MixtureState {
    /// Relabels group 1 ↔ group 2.
    pub fn swap_labels(&mut self) {
        self.group_fits.swap(0, 1);
        self.variances = self.variances.swapped();
        for w in &mut self.weights {
            w.swap(0, 1);
        }
        let neg = |b: f64| if b == 0.0 { 0.0 } else { -b };
        self.logistic.beta0 = neg(self.logistic.beta0);
        self.logistic.beta1.iter_mut().for_each(|b| *b = neg(*b));
        self.priors.iter_mut().for_each(|p| *p = 1.0 - *p);
    }

    /// Puts the group with the larger random-slope variance first. Returns
    /// whether labels were swapped.
    pub fn canonicalize(&mut self) -> bool {
        let (_, zeta) = self.variances.to_natural();
        if zeta[1].sigma2_slope > zeta[0].sigma2_slope {
            self.swap_labels();
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Lasso membership model with cross-validated `λ0`.
    Penalized,
    /// `λ0 = 0` on a fixed covariate set.
    Refit,
}

/// How the iteration starts.
#[derive(Debug, Clone)]
pub enum Init {
    /// Seeded Bernoulli(0.5) assignment.
    Random { seed: u64 },
    /// The complement of `Random { seed }`.
    Swapped { seed: u64 },
    Warm(Box<MixtureState>),
}

/// Work counters of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounters {
    pub e_steps: usize,
    pub logistic_fits: usize,
    pub spline_solves: usize,
    pub variance_optimizations: usize,
}

/// Outcome of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub mode: FitMode,
    pub state: MixtureState,
    pub subject_ids: Vec<String>,
    /// Group label (1 or 2) of each subject.
    pub classifications: Vec<u8>,
    /// Columns of the membership model in this fit.
    pub covariate_names: Vec<String>,
    /// Columns with a nonzero coefficient.
    pub selected_covariates: Vec<String>,
    pub converged: bool,
    pub counters: StepCounters,
    pub knots: Vec<f64>,
    pub scaling: (f64, f64),
    pub n_total: usize,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapResult>,
}

impl FitReport {
    /// Fitted mean curves at scaled times.
    pub fn curves_at(&self, t: &[f64]) -> [Vec<f64>; 2] {
        [
            evaluate_f(&self.state.group_fits[0], &self.knots, t),
            evaluate_f(&self.state.group_fits[1], &self.knots, t),
        ]
    }

    /// Maps a scaled time back to the raw axis.
    pub fn unscale(&self, t: f64) -> f64 {
        self.scaling.0 + t * (self.scaling.1 - self.scaling.0)
    }

    /// Covariates of the membership model: the fixed set of a refit, the
    /// nonzero ones of a penalized fit.
    pub fn membership_covariates(&self) -> &[String] {
        match self.mode {
            FitMode::Refit => &self.covariate_names,
            FitMode::Penalized => &self.selected_covariates,
        }
    }

    /// Indices of [`covariate_names`](Self::covariate_names) inside `names`.
    pub fn support_in(&self, names: &[String]) -> Result<Vec<usize>> {
        self.covariate_names
            .iter()
            .map(|n| {
                names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| Error::InvalidParameter(format!("covariate `{n}` not in the dataset")))
            })
            .collect()
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Seeded Bernoulli(0.5) labels in `{1, 2}`; redrawn once if a group is
/// empty.
pub fn initial_labels(m: usize, seed: u64) -> Result<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut empty = 1;
    for _ in 0..2 {
        let labels: Vec<u8> = (0..m).map(|_| if rng.random::<f64>() < 0.5 { 1 } else { 2 }).collect();
        let n1 = labels.iter().filter(|&&l| l == 1).count();
        if n1 > 0 && n1 < m {
            return Ok(labels);
        }
        empty = if n1 == 0 { 1 } else { 2 };
    }
    Err(Error::EmptyGroup(empty))
}

/// Initial state from a hard assignment: spline fits with identity
/// covariances on each group's own subjects, then one variance optimization
/// with the hard weights.
pub fn initialize(ws: &Workspace, config: &FitConfig, labels: &[u8]) -> Result<MixtureState> {
    if labels.len() != ws.m() || labels.iter().any(|l| *l != 1 && *l != 2) {
        return Err(Error::InvalidParameter("labels must be 1 or 2, one per subject".into()));
    }
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    if n1 == 0 {
        return Err(Error::EmptyGroup(1));
    }
    if n1 == ws.m() {
        return Err(Error::EmptyGroup(2));
    }
    let weights: Vec<[f64; 2]> = labels.iter().map(|&l| if l == 1 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
    let identity: Vec<SubjectCovariance<f64>> =
        ws.y.iter().map(|y| SubjectCovariance::from_matrix(Matrix::identity(y.len()))).collect::<Result<_>>()?;
    let mut fits = Vec::with_capacity(2);
    for k in 0..2 {
        let members: Vec<usize> = (0..ws.m()).filter(|&i| weights[i][k] == 1.0).collect();
        let sys = ReducedSystem::from_subjects(
            ws.n_knots(),
            members.iter().map(|&i| SubjectBlock { y: &ws.y[i], x: &ws.designs[i], cov: &identity[i], w: 1.0 }),
        )?;
        fits.push(sys.select_lambda(&ws.q, ws.n_total, &config.lambda_search)?);
    }
    let fits: [SplineFit<f64>; 2] = [fits[0].clone(), fits[1].clone()];

    let rss: f64 = (0..ws.m())
        .map(|i| {
            let k = labels[i] as usize - 1;
            ws.residual(i, &fits[k]).iter().map(|r| r * r).sum::<f64>()
        })
        .sum();
    let sigma2 = (rss / ws.n_total as f64).max(crate::variance::SIGMA2_FLOOR);
    let start = TransformedVarianceVector::from_relative(sigma2.ln(), &[GroupTransform::from_array([0.0; 4]); 2]);
    let variances = update_variances(ws, &fits, &weights, &start, config)?;

    let logistic = LogisticParams {
        beta0: (n1 as f64).ln() - ((ws.m() - n1) as f64).ln(),
        beta1: vec![0.0; ws.x.cols()],
        lambda0: 0.0,
    };
    let priors = priors_of(ws, &logistic);
    Ok(MixtureState {
        logistic,
        group_fits: fits,
        variances,
        weights,
        priors,
        outer_iter: 0,
        inner_iter: 0,
        trace: Vec::new(),
    })
}

fn priors_of(ws: &Workspace, logistic: &LogisticParams) -> Vec<f64> {
    (0..ws.m()).map(|i| predict_prior(logistic, ws.x.row(i))).collect()
}

/// `(log p_i1, log p_i2)`; exact mirror images under `β → −β`.
fn log_priors(ws: &Workspace, logistic: &LogisticParams) -> Vec<[f64; 2]> {
    (0..ws.m())
        .map(|i| {
            let eta = logistic.linear_predictor(ws.x.row(i));
            [-log1p_exp(-eta), -log1p_exp(eta)]
        })
        .collect()
}

fn log_densities(ws: &Workspace, fits: &[SplineFit<f64>; 2], variances: &TransformedVarianceVector<f64>) -> Vec<[f64; 2]> {
    let sigma2 = variances.log_sigma2.exp();
    let ratio = variances.relative().map(|g| g.to_components());
    let betas = [fits[0].coefficients(), fits[1].coefficients()];
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    (0..ws.m())
        .into_par_iter()
        .map(|i| {
            let s = &ws.times[i];
            let n = s.t.len() as f64;
            [0, 1].map(|k| {
                let r = ws.rotated_residual(i, &betas[k]);
                let inv = s.spectral_inverse(&ratio[k]);
                let (q, _) = inv.quad_form(s, &r);
                -0.5 * (n * (ln_2pi + variances.log_sigma2) + inv.logdet + q / sigma2)
            })
        })
        .collect()
}

/// Group log-densities `log N(y_i; f_k(t_i), V_ik)` at the given parameters.
pub fn group_log_densities(ws: &Workspace, fits: &[SplineFit<f64>; 2], variances: &TransformedVarianceVector<f64>) -> Result<Vec<[f64; 2]>> {
    let ld = log_densities(ws, fits, variances);
    if ld.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("group log-densities".into()));
    }
    Ok(ld)
}

/// `Σ_i log Σ_k p_ik φ_ik`.
fn mixture_loglik(log_prior: &[[f64; 2]], log_density: &[[f64; 2]]) -> f64 {
    log_prior
        .iter()
        .zip(log_density)
        .map(|(lp, ld)| {
            let a = [lp[0] + ld[0], lp[1] + ld[1]];
            let mx = a[0].max(a[1]);
            mx + ((a[0] - mx).exp() + (a[1] - mx).exp()).ln()
        })
        .sum()
}

/// Posterior weights `w_ik ∝ p_ik φ_ik` by log-sum-exp. Entries below
/// `floor` are raised to it and the row renormalized.
pub fn posterior_weights(log_prior: &[[f64; 2]], log_density: &[[f64; 2]], floor: f64) -> Result<Vec<[f64; 2]>> {
    if log_prior.len() != log_density.len() {
        return Err(Error::Dimension("prior vs density rows".into()));
    }
    log_prior
        .iter()
        .zip(log_density)
        .enumerate()
        .map(|(i, (lp, ld))| {
            let a = [lp[0] + ld[0], lp[1] + ld[1]];
            if a.iter().any(|v| v.is_nan() || *v == f64::INFINITY) || a.iter().all(|v| *v == f64::NEG_INFINITY) {
                return Err(Error::NonFinite(format!("group log-densities of subject {i}")));
            }
            let mx = a[0].max(a[1]);
            let e = [(a[0] - mx).exp(), (a[1] - mx).exp()];
            let s = e[0] + e[1];
            let mut w = [e[0] / s, e[1] / s];
            // raising one entry to the floor and renormalizing leaves
            // (floor, 1 − floor) up to O(floor²)
            if w[0] < floor {
                w = [floor, 1.0 - floor];
            } else if w[1] < floor {
                w = [1.0 - floor, floor];
            }
            Ok(w)
        })
        .collect()
}

/// E-step at the parameters in `state`.
pub fn e_step(ws: &Workspace, state: &MixtureState, floor: f64) -> Result<Vec<[f64; 2]>> {
    let ld = group_log_densities(ws, &state.group_fits, &state.variances)?;
    posterior_weights(&log_priors(ws, &state.logistic), &ld, floor)
}

fn column(weights: &[[f64; 2]], k: usize) -> Vec<f64> {
    weights.iter().map(|w| w[k]).collect()
}

fn negated(p: &LogisticParams) -> LogisticParams {
    let neg = |b: f64| if b == 0.0 { 0.0 } else { -b };
    LogisticParams { beta0: neg(p.beta0), beta1: p.beta1.iter().map(|&b| neg(b)).collect(), lambda0: p.lambda0 }
}

/// Logistic half of the M-step. The model is fitted for whichever group
/// [`leading_group`] picks and mirrored if needed, so relabeled runs solve
/// the identical problem. The previous coefficients are kept if the new
/// ones are worse at the new `λ0`.
fn update_logistic(ws: &Workspace, current: &LogisticParams, weights: &[[f64; 2]], config: &FitConfig, mode: FitMode) -> Result<LogisticParams> {
    let cols = [column(weights, 0), column(weights, 1)];
    let lead = leading_group([&cols[0], &cols[1]]);
    let w = &cols[lead];
    let warm = if lead == 0 { current.clone() } else { negated(current) };
    let fitted = if mode == FitMode::Refit || ws.x.cols() == 0 {
        lasso::fit_weighted_lasso_with(&ws.x, w, 0.0, Some(&warm), &lasso::LassoOptions::default())?.params
    } else {
        lasso::select_and_fit(&ws.x, w, &ws.ids, &config.cv, Some(&warm))?.0.params
    };
    let lambda0 = fitted.lambda0;
    let old = LogisticParams { lambda0, ..warm };
    let keep_old = lasso::penalized_log_likelihood(&old, &ws.x, w, lambda0)? > lasso::penalized_log_likelihood(&fitted, &ws.x, w, lambda0)?;
    let chosen = if keep_old { old } else { fitted };
    Ok(if lead == 0 { chosen } else { negated(&chosen) })
}

fn update_spline(
    ws: &Workspace,
    variances: &TransformedVarianceVector<f64>,
    weights: &[[f64; 2]],
    k: usize,
    config: &FitConfig,
    fixed_log10_n_lambda: Option<f64>,
) -> Result<SplineFit<f64>> {
    let w = column(weights, k);
    let sys = ws.spectral_system(variances, k, &w)?;
    match fixed_log10_n_lambda {
        None => sys.select_lambda(&ws.q, ws.n_total, &config.lambda_search),
        Some(l) => sys.fit_at(&ws.q, ws.n_total, l),
    }
}

fn update_variances(
    ws: &Workspace,
    fits: &[SplineFit<f64>; 2],
    weights: &[[f64; 2]],
    current: &TransformedVarianceVector<f64>,
    config: &FitConfig,
) -> Result<TransformedVarianceVector<f64>> {
    let residuals: [Vec<Vec<f64>>; 2] = [
        (0..ws.m()).map(|i| ws.residual(i, &fits[0])).collect(),
        (0..ws.m()).map(|i| ws.residual(i, &fits[1])).collect(),
    ];
    let w = [column(weights, 0), column(weights, 1)];
    let problem = VarianceProblem {
        subjects: &ws.times,
        residuals: [&residuals[0], &residuals[1]],
        weights: [&w[0], &w[1]],
        n_total: ws.n_total,
    };
    Ok(optimize_variances(&problem, current, &config.variance)?.theta)
}

/// `½ Σ_k Nλ_k c_kᵀ Q c_k`.
fn spline_penalty(ws: &Workspace, fits: &[SplineFit<f64>; 2], log10_n_lambda: [f64; 2]) -> f64 {
    (0..2).map(|k| 0.5 * 10f64.powf(log10_n_lambda[k]) * fits[k].roughness(&ws.q)).sum()
}

/// Observed-data penalized log-likelihood
/// `Σ_i log Σ_k p_ik φ_ik − λ0 ‖β‖₁ − ½ Σ_k Nλ_k c_kᵀQc_k` with the
/// smoothing parameters supplied by the caller.
pub fn penalized_loglik(
    ws: &Workspace,
    logistic: &LogisticParams,
    fits: &[SplineFit<f64>; 2],
    variances: &TransformedVarianceVector<f64>,
    lambda0: f64,
    log10_n_lambda: [f64; 2],
) -> Result<f64> {
    let ld = group_log_densities(ws, fits, variances)?;
    Ok(mixture_loglik(&log_priors(ws, logistic), &ld)
        - lambda0 * lasso::standardized_l1(logistic, &ws.x)?
        - spline_penalty(ws, fits, log10_n_lambda))
}

/// Expected complete-data penalized log-likelihood at fixed weights:
/// `Σ_i Σ_k w_ik (log p_ik + log φ_ik) − λ0 ‖β‖₁ − ½ Σ_k Nλ_k c_kᵀQc_k`.
pub fn expected_objective(
    ws: &Workspace,
    logistic: &LogisticParams,
    fits: &[SplineFit<f64>; 2],
    variances: &TransformedVarianceVector<f64>,
    weights: &[[f64; 2]],
    lambda0: f64,
    log10_n_lambda: [f64; 2],
) -> Result<f64> {
    let ld = group_log_densities(ws, fits, variances)?;
    let lp = log_priors(ws, logistic);
    let q: f64 = (0..ws.m()).map(|i| (0..2).map(|k| weights[i][k] * (lp[i][k] + ld[i][k])).sum::<f64>()).sum();
    Ok(q - lambda0 * lasso::standardized_l1(logistic, &ws.x)? - spline_penalty(ws, fits, log10_n_lambda))
}

/// Parameters entering the relative-change rules, groups ordered by `lead`
/// so the sums are evaluated identically under relabeling.
fn estimates(logistic: Option<&LogisticParams>, fits: &[SplineFit<f64>; 2], variances: &TransformedVarianceVector<f64>, lead: usize) -> Vec<f64> {
    let mut v = Vec::new();
    if let Some(l) = logistic {
        v.push(l.beta0);
        v.extend(&l.beta1);
    }
    for k in [lead, 1 - lead] {
        v.extend(fits[k].coefficients());
    }
    v.push(variances.log_sigma2);
    for k in [lead, 1 - lead] {
        v.extend(variances.groups[k].to_array());
    }
    v
}

/// `‖new − old‖² / (‖old‖² + κ)`.
pub fn relative_change(new: &[f64], old: &[f64], kappa: f64) -> f64 {
    let num: f64 = new.iter().zip(old).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = old.iter().map(|b| b * b).sum::<f64>() + kappa;
    num / den
}

/// New parameters from one M-step.
#[derive(Debug, Clone)]
pub struct MStep {
    pub logistic: LogisticParams,
    pub group_fits: [SplineFit<f64>; 2],
    pub variances: TransformedVarianceVector<f64>,
    pub inner_passes: usize,
    pub inner_distances: Vec<f64>,
}

/// One M-step at fixed weights, starting from the parameters in `state`.
pub fn m_step(ws: &Workspace, state: &MixtureState, weights: &[[f64; 2]], config: &FitConfig, mode: FitMode) -> Result<MStep> {
    let mut counters = StepCounters::default();
    m_step_inner(ws, state, weights, config, mode, &mut counters)
}

fn m_step_inner(
    ws: &Workspace,
    state: &MixtureState,
    weights: &[[f64; 2]],
    config: &FitConfig,
    mode: FitMode,
    counters: &mut StepCounters,
) -> Result<MStep> {
    let w_cols = [column(weights, 0), column(weights, 1)];
    let lead = leading_group([&w_cols[0], &w_cols[1]]);
    let logistic = update_logistic(ws, &state.logistic, weights, config, mode)?;
    counters.logistic_fits += 1;

    let mut fits = state.group_fits.clone();
    let mut variances = state.variances.clone();
    let mut fixed: [Option<f64>; 2] = [None; 2];
    let mut distances = Vec::new();
    for _ in 0..config.stopping.max_inner {
        let before = estimates(None, &fits, &variances, lead);
        for k in 0..2 {
            fits[k] = update_spline(ws, &variances, weights, k, config, fixed[k])?;
            fixed[k] = Some(fits[k].log10_n_lambda);
            counters.spline_solves += 1;
        }
        variances = update_variances(ws, &fits, weights, &variances, config)?;
        counters.variance_optimizations += 1;
        let d = relative_change(&estimates(None, &fits, &variances, lead), &before, config.stopping.kappa2);
        distances.push(d);
        if d <= config.stopping.d_inner {
            break;
        }
    }
    let step = MStep { logistic, group_fits: fits, variances, inner_passes: distances.len(), inner_distances: distances };
    Ok(step)
}

/// Runs the EM iteration from `init` until the relative change of the
/// estimates is at most `D_EM` or `O_max` iterations have run, then
/// classifies subjects and puts the steeper-slope group first.
pub fn run_em(ws: &Workspace, config: &FitConfig, init: Init, mode: FitMode) -> Result<FitReport> {
    config.validate()?;
    let mut state = match init {
        Init::Random { seed } => initialize(ws, config, &initial_labels(ws.m(), seed)?)?,
        Init::Swapped { seed } => {
            let labels: Vec<u8> = initial_labels(ws.m(), seed)?.into_iter().map(|l| 3 - l).collect();
            initialize(ws, config, &labels)?
        }
        Init::Warm(s) => {
            let mut s = *s;
            if s.logistic.beta1.len() != ws.x.cols() || s.weights.len() != ws.m() {
                return Err(Error::Dimension("warm start does not match the workspace".into()));
            }
            if s.group_fits.iter().any(|f| f.c.len() != ws.n_knots()) {
                return Err(Error::Dimension("warm start knot count".into()));
            }
            s.outer_iter = 0;
            s.inner_iter = 0;
            s.trace.clear();
            s
        }
    };
    let stop = config.stopping;
    let mut counters = StepCounters::default();
    let mut log_dens = group_log_densities(ws, &state.group_fits, &state.variances)?;
    let mut converged = false;

    for outer in 1..=stop.max_outer {
        let log_prior = log_priors(ws, &state.logistic);
        let mixture_before = mixture_loglik(&log_prior, &log_dens);
        let weights = posterior_weights(&log_prior, &log_dens, config.weight_floor)?;
        counters.e_steps += 1;
        let w_cols = [column(&weights, 0), column(&weights, 1)];
        let lead = leading_group([&w_cols[0], &w_cols[1]]);
        let before = estimates(Some(&state.logistic), &state.group_fits, &state.variances, lead);

        let step = m_step_inner(ws, &state, &weights, config, mode, &mut counters)?;
        for (j, d) in step.inner_distances.iter().enumerate() {
            state.trace.push(TraceEntry { outer, inner: Some(j + 1), distance: *d, loglik_before: None, loglik_after: None });
        }
        log_dens = group_log_densities(ws, &step.group_fits, &step.variances)?;

        let lambda0 = step.logistic.lambda0;
        let n_lambda = [step.group_fits[0].log10_n_lambda, step.group_fits[1].log10_n_lambda];
        let loglik_before = mixture_before
            - lambda0 * lasso::standardized_l1(&state.logistic, &ws.x)?
            - spline_penalty(ws, &state.group_fits, n_lambda);
        let loglik_after = mixture_loglik(&log_priors(ws, &step.logistic), &log_dens)
            - lambda0 * lasso::standardized_l1(&step.logistic, &ws.x)?
            - spline_penalty(ws, &step.group_fits, n_lambda);

        state.logistic = step.logistic;
        state.group_fits = step.group_fits;
        state.variances = step.variances;
        state.weights = weights;
        state.outer_iter = outer;
        state.inner_iter += step.inner_passes;
        let d_em = relative_change(&estimates(Some(&state.logistic), &state.group_fits, &state.variances, lead), &before, stop.kappa1);
        state.trace.push(TraceEntry {
            outer,
            inner: None,
            distance: d_em,
            loglik_before: Some(loglik_before),
            loglik_after: Some(loglik_after),
        });
        if d_em <= stop.d_em {
            converged = true;
            break;
        }
    }

    let log_prior = log_priors(ws, &state.logistic);
    state.weights = posterior_weights(&log_prior, &log_dens, config.weight_floor)?;
    counters.e_steps += 1;
    state.priors = priors_of(ws, &state.logistic);
    state.canonicalize();
    Ok(report(ws, config, state, mode, converged, counters))
}

fn report(ws: &Workspace, config: &FitConfig, state: MixtureState, mode: FitMode, converged: bool, counters: StepCounters) -> FitReport {
    let classifications = state.weights.iter().map(|w| if w[0] >= config.threshold { 1 } else { 2 }).collect();
    let selected_covariates = state.logistic.support().into_iter().map(|j| ws.covariate_names[j].clone()).collect();
    FitReport {
        mode,
        state,
        subject_ids: ws.ids.clone(),
        classifications,
        covariate_names: ws.covariate_names.clone(),
        selected_covariates,
        converged,
        counters,
        knots: ws.knots.clone(),
        scaling: ws.scaling,
        n_total: ws.n_total,
        threshold: config.threshold,
        bootstrap: None,
    }
}

/// Reruns the iteration with `λ0 = 0` and the membership model restricted to
/// `support` (indices into `ws.covariate_names`). A warm start with the full
/// covariate dimension is restricted to `support`.
pub fn refit_unpenalized(ws: &Workspace, config: &FitConfig, support: &[usize], init: Init) -> Result<FitReport> {
    let restricted = ws.restrict(support)?;
    let init = match init {
        Init::Warm(mut s) if s.logistic.beta1.len() == ws.x.cols() => {
            s.logistic.beta1 = support.iter().map(|&j| s.logistic.beta1[j]).collect();
            s.logistic.lambda0 = 0.0;
            Init::Warm(s)
        }
        other => other,
    };
    run_em(&restricted, config, init, FitMode::Refit)
}

/// Penalized fit followed by the unpenalized refit on the selected support.
#[derive(Debug, Clone)]
pub struct PipelineFit {
    pub penalized: FitReport,
    pub refit: FitReport,
}

/// Variable selection with the penalized EM from a seeded random start, then
/// the refit warm-started from the penalized estimate.
pub fn fit_pipeline(ws: &Workspace, config: &FitConfig) -> Result<PipelineFit> {
    let penalized = run_em(ws, config, Init::Random { seed: config.seed }, FitMode::Penalized)?;
    let support = penalized.state.logistic.support();
    let refit = refit_unpenalized(ws, config, &support, Init::Warm(Box::new(penalized.state.clone())))?;
    Ok(PipelineFit { penalized, refit })
}

/// Membership of the subjects of a dataset under a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub subject_ids: Vec<String>,
    /// Prior probability of group 1 from the membership model.
    pub priors: Vec<f64>,
    /// Posterior probability of group 1 given the trajectory.
    pub posteriors: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Posterior classification of `dataset` (possibly new subjects) with the
/// parameters of `report`. Times are scaled by the fit's time range and the
/// membership covariates are matched by name.
pub fn classify(report: &FitReport, dataset: &LongitudinalDataset) -> Result<Classification> {
    let ws = Workspace::for_report(report, dataset)?;
    let ws = ws.restrict(&report.support_in(&ws.covariate_names)?)?;
    let state = &report.state;
    let ld = group_log_densities(&ws, &state.group_fits, &state.variances)?;
    let w = posterior_weights(&log_priors(&ws, &state.logistic), &ld, WEIGHT_FLOOR)?;
    Ok(Classification {
        subject_ids: ws.ids.clone(),
        priors: priors_of(&ws, &state.logistic),
        posteriors: column(&w, 0),
        labels: w.iter().map(|w| if w[0] >= report.threshold { 1 } else { 2 }).collect(),
    })
}
