//! Parametric bootstrap: responses are redrawn from the fitted model on the
//! observed covariates and time grids, refitted with the membership support
//! of the original fit held fixed, and summarized by percentile intervals.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::FitConfig;
use crate::em::{refit_unpenalized, FitMode, FitReport, Init, Workspace};
use crate::error::{Error, Result};
use crate::simulate::{draw_responses, subject_rng, unit_grid, EVAL_GRID_POINTS};

/// Two-sided coverage of the reported intervals.
pub const INTERVAL_LEVEL: f64 = 0.95;

/// Percentile interval of one scalar parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterInterval {
    pub name: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Pointwise band for one group's mean curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBand {
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub n_replicates: usize,
    pub n_converged: usize,
    pub seed: u64,
    /// Convergence flag of each replicate, in replicate order.
    pub converged: Vec<bool>,
    pub parameters: Vec<ParameterInterval>,
    /// Scaled and raw times of the curve bands.
    pub grid_scaled: Vec<f64>,
    pub grid_raw: Vec<f64>,
    pub bands: [CurveBand; 2],
}

impl BootstrapResult {
    pub fn parameter(&self, name: &str) -> Option<&ParameterInterval> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// Parameters and curves extracted from one (canonically labeled) fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub converged: bool,
    pub parameters: Vec<f64>,
    pub curves: [Vec<f64>; 2],
}

impl ReplicateRecord {
    pub fn from_report(report: &FitReport, grid_scaled: &[f64]) -> Self {
        let (sigma2, zeta) = report.state.variances.to_natural();
        let mut parameters = vec![sigma2];
        for z in &zeta {
            parameters.extend([z.sigma2_inter, z.sigma_is, z.sigma2_slope, z.sigma2_non]);
        }
        parameters.push(report.state.logistic.beta0);
        parameters.extend(&report.state.logistic.beta1);
        Self { converged: report.converged, parameters, curves: report.curves_at(grid_scaled) }
    }
}

/// Names matching [`ReplicateRecord::parameters`].
pub fn parameter_names(covariate_names: &[String]) -> Vec<String> {
    let mut names = vec!["sigma2".to_string()];
    for g in 1..=2 {
        for c in ["sigma2_inter", "sigma_is", "sigma2_slope", "sigma2_non"] {
            names.push(format!("group{g}.{c}"));
        }
    }
    names.push("beta0".into());
    names.extend(covariate_names.iter().map(|n| format!("beta.{n}")));
    names
}

/// Inverse-ECDF quantile: the smallest value whose empirical CDF reaches `p`.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    // the offset absorbs rounding in p·n for exact multiples
    let k = ((p * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[k - 1]
}

/// `(lower, upper)` percentile interval at [`INTERVAL_LEVEL`].
pub fn percentile_interval(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("percentile interval needs finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - INTERVAL_LEVEL);
    Ok((empirical_quantile(&sorted, tail), empirical_quantile(&sorted, 1.0 - tail)))
}

/// Intervals over the converged replicates. Fails when fewer than half of
/// them converged.
pub fn aggregate(point: &ReplicateRecord, names: &[String], records: &[ReplicateRecord]) -> Result<(Vec<ParameterInterval>, [CurveBand; 2])> {
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.converged).collect();
    if names.len() != point.parameters.len() || ok.iter().any(|r| r.parameters.len() != names.len()) {
        return Err(Error::Dimension("replicate parameter vectors".into()));
    }
    if ok.is_empty() || 2 * ok.len() < records.len() {
        return Err(Error::NoConvergence(format!("only {} of {} bootstrap replicates converged", ok.len(), records.len())));
    }
    let mut parameters = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let values: Vec<f64> = ok.iter().map(|r| r.parameters[j]).collect();
        let (lower, upper) = percentile_interval(&values)?;
        parameters.push(ParameterInterval { name: name.clone(), estimate: point.parameters[j], lower, upper });
    }
    let band = |k: usize| -> Result<CurveBand> {
        let len = point.curves[k].len();
        let mut lower = Vec::with_capacity(len);
        let mut upper = Vec::with_capacity(len);
        for g in 0..len {
            let values: Vec<f64> = ok.iter().map(|r| r.curves[k][g]).collect();
            let (lo, hi) = percentile_interval(&values)?;
            lower.push(lo);
            upper.push(hi);
        }
        Ok(CurveBand { estimate: point.curves[k].clone(), lower, upper })
    };
    Ok((parameters, [band(0)?, band(1)?]))
}

/// Covariate indices (into `ws`) of the membership model held fixed across
/// replicates.
fn fixed_support(report: &FitReport, ws: &Workspace) -> Result<Vec<usize>> {
    report
        .membership_covariates()
        .iter()
        .map(|n| {
            ws.covariate_names
                .iter()
                .position(|m| m == n)
                .ok_or_else(|| Error::InvalidParameter(format!("covariate `{n}` not in the dataset")))
        })
        .collect()
}

/// Responses of one replicate: labels from the fitted priors, then the
/// fitted curve of that group plus random effects and noise.
pub fn simulate_responses(report: &FitReport, ws: &Workspace, seed: u64) -> Result<Vec<Vec<f64>>> {
    if report.state.priors.len() != ws.m() || report.knots.len() != ws.n_knots() {
        return Err(Error::Dimension("report does not match the dataset".into()));
    }
    let (sigma2, zeta) = report.state.variances.to_natural();
    let y = (0..ws.m())
        .into_par_iter()
        .map(|i| {
            let mut rng = subject_rng(seed, i);
            let k = if rng.random::<f64>() < report.state.priors[i] { 0 } else { 1 };
            let f = ws.fitted(i, &report.state.group_fits[k]);
            draw_responses(&mut rng, &ws.times[i].t, &f, &zeta[k], sigma2)
        })
        .collect();
    Ok(y)
}

/// One bootstrap replicate: simulate with `seed`, refit warm-started from
/// the point estimate, relabel canonically.
pub fn replicate(report: &FitReport, ws: &Workspace, config: &FitConfig, seed: u64) -> Result<FitReport> {
    let support = fixed_support(report, ws)?;
    let sim = ws.with_responses(simulate_responses(report, ws, seed)?)?;
    let mut warm = report.state.clone();
    if report.mode == FitMode::Penalized {
        warm.logistic.beta1 = report.state.logistic.support().iter().map(|&j| report.state.logistic.beta1[j]).collect();
        warm.logistic.lambda0 = 0.0;
    }
    let restricted = sim.restrict(&support)?;
    let all: Vec<usize> = (0..support.len()).collect();
    refit_unpenalized(&restricted, config, &all, Init::Warm(Box::new(warm)))
}

/// Runs `b_count` replicates with seeds `seed + b` on at most `threads`
/// workers and summarizes them.
pub fn bootstrap_fit(report: &FitReport, ws: &Workspace, config: &FitConfig, b_count: usize, seed: u64, threads: Option<usize>) -> Result<BootstrapResult> {
    if !report.converged {
        return Err(Error::InvalidParameter("bootstrap needs a converged fit".into()));
    }
    if b_count < 2 {
        return Err(Error::InvalidParameter("bootstrap needs at least 2 replicates".into()));
    }
    config.validate()?;
    fixed_support(report, ws)?;
    let grid_scaled = unit_grid(EVAL_GRID_POINTS);
    let run = || -> Vec<ReplicateRecord> {
        (0..b_count)
            .into_par_iter()
            .map(|b| match replicate(report, ws, config, seed.wrapping_add(b as u64)) {
                Ok(r) => ReplicateRecord::from_report(&r, &grid_scaled),
                Err(_) => ReplicateRecord { converged: false, parameters: Vec::new(), curves: [Vec::new(), Vec::new()] },
            })
            .collect()
    };
    let records = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let names = parameter_names(report.membership_covariates());
    let point = ReplicateRecord::from_report(report, &grid_scaled);
    let point = restrict_record(report, point);
    let (parameters, bands) = aggregate(&point, &names, &records)?;
    Ok(BootstrapResult {
        n_replicates: b_count,
        n_converged: records.iter().filter(|r| r.converged).count(),
        seed,
        converged: records.iter().map(|r| r.converged).collect(),
        parameters,
        grid_raw: grid_scaled.iter().map(|t| report.unscale(*t)).collect(),
        grid_scaled,
        bands,
    })
}

/// Drops unselected coefficients from a penalized point estimate.
fn restrict_record(report: &FitReport, mut point: ReplicateRecord) -> ReplicateRecord {
    if report.mode == FitMode::Penalized {
        let head = point.parameters.len() - report.state.logistic.beta1.len();
        let support = report.state.logistic.support();
        let beta: Vec<f64> = support.iter().map(|&j| point.parameters[head + j]).collect();
        point.parameters.truncate(head);
        point.parameters.extend(beta);
    }
    point
}
