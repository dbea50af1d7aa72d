//! Synthetic datasets from the two-group generative model: covariates,
//! logistic group labels, random intercept/slope, smooth random effects and
//! Gaussian noise on a day grid.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::VarianceComponents;
use crate::data::{LongitudinalDataset, RawSubject};
use crate::error::{Error, Result};
use crate::kernel::{r1_gram, SplineBasis};
use crate::lasso::{predict_prior, LogisticParams};
use crate::linalg::{Matrix, SymmetricEigen};
use crate::spline::{evaluate_f, ReducedSystem, SplineFit};

/// Number of points of the default tabulated curves.
pub const CURVE_TABLE_POINTS: usize = 31;
/// Points of the uniform evaluation grid used for curve tables and scoring.
pub const EVAL_GRID_POINTS: usize = 101;

/// `log10(Nλ)` used to interpolate tabulated curves.
const INTERPOLATION_LOG10_N_LAMBDA: f64 = -8.0;

/// Uniform grid of `n` points on `[0, 1]`.
pub fn unit_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|j| j as f64 / (n - 1) as f64).collect(),
    }
}

/// Distribution of one raw covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovariateSpec {
    /// Draws a level with the given probabilities; the first level is the
    /// reference and every other level becomes an indicator column
    /// `name_level`.
    Categorical { name: String, levels: Vec<String>, probs: Vec<f64> },
    Exponential { name: String, rate: f64 },
    Gamma { name: String, shape: f64, rate: f64 },
    Normal { name: String, mean: f64, sd: f64 },
}

impl CovariateSpec {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        match self {
            Self::Categorical { name, levels, probs } => {
                if levels.len() < 2 || levels.len() != probs.len() {
                    return bad(format!("covariate `{name}`: need at least two levels with one probability each"));
                }
                let total: f64 = probs.iter().sum();
                if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return bad(format!("covariate `{name}`: probabilities must be >= 0 and sum to 1"));
                }
            }
            Self::Exponential { name, rate } => {
                if !(*rate > 0.0) || !rate.is_finite() {
                    return bad(format!("covariate `{name}`: rate must be positive"));
                }
            }
            Self::Gamma { name, shape, rate } => {
                if !(*shape > 0.0 && *rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
                    return bad(format!("covariate `{name}`: shape and rate must be positive"));
                }
            }
            Self::Normal { name, mean, sd } => {
                if !(*sd >= 0.0) || !sd.is_finite() || !mean.is_finite() {
                    return bad(format!("covariate `{name}`: invalid normal parameters"));
                }
            }
        }
        Ok(())
    }

    /// Names of the encoded columns.
    pub fn columns(&self) -> Vec<String> {
        match self {
            Self::Categorical { name, levels, .. } => levels[1..].iter().map(|l| format!("{name}_{l}")).collect(),
            Self::Exponential { name, .. } | Self::Gamma { name, .. } | Self::Normal { name, .. } => vec![name.clone()],
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R, out: &mut Vec<f64>) {
        match self {
            Self::Categorical { levels, probs, .. } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut level = levels.len() - 1;
                for (j, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        level = j;
                        break;
                    }
                }
                out.extend((1..levels.len()).map(|j| if j == level { 1.0 } else { 0.0 }));
            }
            Self::Exponential { rate, .. } => out.push(Exp::new(*rate).expect("validated").sample(rng)),
            Self::Gamma { shape, rate, .. } => out.push(Gamma::new(*shape, 1.0 / rate).expect("validated").sample(rng)),
            Self::Normal { mean, sd, .. } => out.push(Normal::new(*mean, *sd).expect("validated").sample(rng)),
        }
    }
}

/// A true mean curve on the scaled time axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeanCurve {
    Constant { value: f64 },
    /// `height · ((t − onset) / (1 − onset))²` for `t ≥ onset`, zero before.
    Ramp { onset: f64, height: f64 },
    /// Values at increasing points of `[0, 1]`, interpolated by a smoothing
    /// spline with knots at every point and a negligible penalty.
    Tabulated { t: Vec<f64>, values: Vec<f64> },
}

impl MeanCurve {
    /// A closed-form curve tabulated on the default grid.
    pub fn tabulate(&self, n: usize) -> Result<Self> {
        let t = unit_grid(n);
        let values = self.prepare()?.eval(&t);
        Ok(Self::Tabulated { t, values })
    }

    /// Precomputes whatever evaluation needs.
    pub fn prepare(&self) -> Result<PreparedCurve> {
        match self {
            Self::Constant { value } => {
                if !value.is_finite() {
                    return Err(Error::InvalidParameter("curve value must be finite".into()));
                }
                Ok(PreparedCurve::Closed(self.clone()))
            }
            Self::Ramp { onset, height } => {
                if !(0.0..1.0).contains(onset) || !height.is_finite() {
                    return Err(Error::InvalidParameter("ramp onset must lie in [0, 1) with a finite height".into()));
                }
                Ok(PreparedCurve::Closed(self.clone()))
            }
            Self::Tabulated { t, values } => {
                if t.len() < 3 || t.len() != values.len() {
                    return Err(Error::InvalidParameter("tabulated curve needs at least 3 points with one value each".into()));
                }
                if t.windows(2).any(|w| !(w[0] < w[1])) || t[0] < 0.0 || t[t.len() - 1] > 1.0 {
                    return Err(Error::InvalidParameter("tabulated points must increase within [0, 1]".into()));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("tabulated curve values".into()));
                }
                let basis = SplineBasis::with_knots(t, t.clone());
                let sys = ReducedSystem::from_whitened(values, &basis.s, &basis.r)?;
                let fit = sys.fit_at(&basis.q, t.len(), INTERPOLATION_LOG10_N_LAMBDA)?;
                Ok(PreparedCurve::Spline { fit, knots: t.clone() })
            }
        }
    }
}

/// A curve ready for repeated evaluation.
#[derive(Debug, Clone)]
pub enum PreparedCurve {
    Closed(MeanCurve),
    Spline { fit: SplineFit<f64>, knots: Vec<f64> },
}

impl PreparedCurve {
    pub fn eval(&self, t: &[f64]) -> Vec<f64> {
        match self {
            Self::Closed(MeanCurve::Constant { value }) => vec![*value; t.len()],
            Self::Closed(MeanCurve::Ramp { onset, height }) => t
                .iter()
                .map(|&x| {
                    if x < *onset {
                        0.0
                    } else {
                        let u = (x - onset) / (1.0 - onset);
                        height * u * u
                    }
                })
                .collect(),
            Self::Closed(MeanCurve::Tabulated { .. }) => unreachable!("tabulated curves are prepared as splines"),
            Self::Spline { fit, knots } => evaluate_f(fit, knots, t),
        }
    }
}

/// Full generative configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationDesign {
    pub m: usize,
    /// Inclusive range of the per-subject observation count.
    pub n_range: (usize, usize),
    /// Raw time window; observation days are the integers inside it.
    pub time_window: (f64, f64),
    pub beta0: f64,
    /// Nonzero coefficients by encoded column name; unlisted columns are 0.
    pub beta: BTreeMap<String, f64>,
    pub sigma2: f64,
    pub zeta: [VarianceComponents<f64>; 2],
    pub curves: [MeanCurve; 2],
    pub covariates: Vec<CovariateSpec>,
    pub seed: u64,
}

/// Category shares used by [`default_covariates`]. They are not published
/// for the motivating data, so these are plausible values for a dialysis
/// population.
pub fn default_covariates() -> Vec<CovariateSpec> {
    let cat = |name: &str, levels: &[&str], probs: &[f64]| CovariateSpec::Categorical {
        name: name.into(),
        levels: levels.iter().map(|s| s.to_string()).collect(),
        probs: probs.to_vec(),
    };
    vec![
        cat("gender", &["F", "M"], &[0.44, 0.56]),
        cat("race", &["Other", "White"], &[0.5, 0.5]),
        cat("ethnicity", &["Hispanic", "NonHispanic"], &[0.15, 0.85]),
        cat("diabetes", &["N", "Y"], &[0.4, 0.6]),
        cat("hypertension", &["N", "Y"], &[0.15, 0.85]),
        cat("access", &["AVF", "AVG", "CVCATH"], &[0.65, 0.15, 0.2]),
        CovariateSpec::Exponential { name: "vintage".into(), rate: 0.22 },
        CovariateSpec::Gamma { name: "bmi".into(), shape: 15.5, rate: 0.5 },
        CovariateSpec::Normal { name: "age".into(), mean: 62.0, sd: 14.0 },
    ]
}

/// Random-effect variances from the reference analysis, with the smooth
/// variances supplied by the caller.
pub fn reference_zeta(sigma2_non: [f64; 2]) -> [VarianceComponents<f64>; 2] {
    [
        VarianceComponents { sigma2_inter: 0.0958, sigma_is: -0.0817, sigma2_slope: 0.5125, sigma2_non: sigma2_non[0] },
        VarianceComponents { sigma2_inter: 0.0625, sigma_is: -0.0147, sigma2_slope: 0.0980, sigma2_non: sigma2_non[1] },
    ]
}

/// Default true curves: a late quadratic rise to 1.5 for group 1 and a flat
/// group 2, both tabulated on a 31-point grid.
pub fn default_curves() -> [MeanCurve; 2] {
    let ramp = MeanCurve::Ramp { onset: 0.7, height: 1.5 };
    let flat = MeanCurve::Constant { value: 0.0 };
    [
        ramp.tabulate(CURVE_TABLE_POINTS).expect("valid ramp"),
        flat.tabulate(CURVE_TABLE_POINTS).expect("valid constant"),
    ]
}

impl SimulationDesign {
    /// Reference design with or without smooth random effects
    /// (`σ²_non = 14.5, 14` when `smooth`).
    pub fn reference(m: usize, seed: u64, smooth: bool) -> Self {
        let non = if smooth { [14.5, 14.0] } else { [0.0, 0.0] };
        Self {
            m,
            n_range: (16, 31),
            time_window: (-30.0, 0.0),
            beta0: -1.1048,
            beta: BTreeMap::from([("race_White".to_string(), -0.3788), ("age".to_string(), -0.0103)]),
            sigma2: 0.4142,
            zeta: reference_zeta(non),
            curves: default_curves(),
            covariates: default_covariates(),
            seed,
        }
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates.iter().flat_map(CovariateSpec::columns).collect()
    }

    /// Number of integer days inside the window.
    fn day_range(&self) -> (i64, i64) {
        (self.time_window.0.ceil() as i64, self.time_window.1.floor() as i64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidParameter("m must be positive".into()));
        }
        let (lo, hi) = self.n_range;
        if lo < 2 || hi > 200 || lo > hi {
            return Err(Error::InvalidParameter("n_range must satisfy 2 <= lo <= hi <= 200".into()));
        }
        let (a, b) = self.time_window;
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::DegenerateTimeRange { t_min: a, t_max: b });
        }
        let (d0, d1) = self.day_range();
        if d1 - d0 + 1 < hi as i64 {
            return Err(Error::InvalidParameter(format!(
                "time window holds {} days but up to {hi} distinct days are requested",
                (d1 - d0 + 1).max(0)
            )));
        }
        if !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() {
            return Err(Error::InvalidParameter("sigma2 must be >= 0".into()));
        }
        for z in &self.zeta {
            z.validate()?;
        }
        for c in &self.covariates {
            c.validate()?;
        }
        let names = self.covariate_names();
        if let Some(name) = self.beta.keys().find(|n| !names.contains(n)) {
            return Err(Error::InvalidParameter(format!("coefficient for unknown column `{name}`")));
        }
        if !self.beta0.is_finite() || self.beta.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logistic truth".into()));
        }
        Ok(())
    }

    /// True logistic parameters aligned with [`covariate_names`](Self::covariate_names).
    pub fn logistic_truth(&self) -> LogisticParams {
        let beta1 = self.covariate_names().iter().map(|n| self.beta.get(n).copied().unwrap_or(0.0)).collect();
        LogisticParams { beta0: self.beta0, beta1, lambda0: 0.0 }
    }
}

fn master_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream for subject `i`.
pub fn subject_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

/// Draws the `m × p` encoded covariate matrix.
pub fn generate_covariates(design: &SimulationDesign, m: usize) -> Result<Matrix<f64>> {
    for c in &design.covariates {
        c.validate()?;
    }
    let p = design.covariate_names().len();
    let mut rng = master_rng(design.seed);
    let mut data = Vec::with_capacity(m * p);
    for _ in 0..m {
        for c in &design.covariates {
            c.draw(&mut rng, &mut data);
        }
    }
    Matrix::from_vec(m, p, data)
}

/// Group labels (1 or 2) drawn from the logistic model at the true
/// coefficients. Uses a stream separate from the covariates.
pub fn generate_labels(design: &SimulationDesign, x: &Matrix<f64>) -> Result<Vec<u8>> {
    let truth = design.logistic_truth();
    if x.cols() != truth.beta1.len() {
        return Err(Error::Dimension(format!("{} covariate columns, {} coefficients", x.cols(), truth.beta1.len())));
    }
    let mut rng = master_rng(design.seed);
    rng.set_stream(u64::MAX);
    Ok((0..x.rows())
        .map(|i| if rng.random::<f64>() < predict_prior(&truth, x.row(i)) { 1 } else { 2 })
        .collect())
}

/// One response vector `f + b1 + b2 t + s(t) + ε` at scaled times `t`.
/// The kernel is only evaluated when `σ²_non > 0`.
pub fn draw_responses<R: Rng>(rng: &mut R, t: &[f64], f: &[f64], zeta: &VarianceComponents<f64>, sigma2: f64) -> Vec<f64> {
    let n = t.len();
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let a = zeta.sigma2_inter.max(0.0).sqrt();
    let (b1, b2) = if a > 0.0 {
        let l21 = zeta.sigma_is / a;
        let l22 = (zeta.sigma2_slope - l21 * l21).max(0.0).sqrt();
        (a * z1, l21 * z1 + l22 * z2)
    } else {
        (0.0, zeta.sigma2_slope.max(0.0).sqrt() * z2)
    };
    let smooth = if zeta.sigma2_non > 0.0 {
        let eig = SymmetricEigen::new(&r1_gram(t)).expect("kernel Gram is symmetric");
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let scale = zeta.sigma2_non.sqrt();
        (0..n)
            .map(|r| {
                (0..n)
                    .map(|j| eig.vectors[(r, j)] * eig.values[j].max(0.0).sqrt() * z[j])
                    .sum::<f64>()
                    * scale
            })
            .collect()
    } else {
        vec![0.0; n]
    };
    let sd = sigma2.max(0.0).sqrt();
    (0..n)
        .map(|j| {
            let e: f64 = rng.sample(StandardNormal);
            f[j] + b1 + b2 * t[j] + smooth[j] + sd * e
        })
        .collect()
}

/// Subject identifiers `S00001, S00002, …`.
pub fn subject_ids(m: usize) -> Vec<String> {
    (1..=m).map(|i| format!("S{i:05}")).collect()
}

/// Draws times and responses for every subject given labels and covariates.
pub fn generate_trajectories(design: &SimulationDesign, labels: &[u8], x: &Matrix<f64>) -> Result<LongitudinalDataset> {
    design.validate()?;
    if labels.len() != x.rows() || labels.iter().any(|l| *l != 1 && *l != 2) {
        return Err(Error::InvalidParameter("labels must be 1 or 2, one per covariate row".into()));
    }
    let curves = [design.curves[0].prepare()?, design.curves[1].prepare()?];
    let (d0, d1) = design.day_range();
    let n_days = (d1 - d0 + 1) as usize;
    let (a, b) = design.time_window;
    let ids = subject_ids(labels.len());
    let raw: Vec<RawSubject> = (0..labels.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = subject_rng(design.seed, i);
            let n = rng.random_range(design.n_range.0..=design.n_range.1);
            let mut days: Vec<i64> = sample(&mut rng, n_days, n).into_iter().map(|d| d0 + d as i64).collect();
            days.sort_unstable();
            let times: Vec<f64> = days.iter().map(|&d| d as f64).collect();
            let scaled: Vec<f64> = times.iter().map(|&d| (d - a) / (b - a)).collect();
            let k = labels[i] as usize - 1;
            let f = curves[k].eval(&scaled);
            let responses = draw_responses(&mut rng, &scaled, &f, &design.zeta[k], design.sigma2);
            RawSubject { subject_id: ids[i].clone(), times, responses, covariates: x.row(i).to_vec() }
        })
        .collect();
    LongitudinalDataset::from_raw(raw, design.covariate_names(), Some(design.time_window))
}

/// True curves tabulated on the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub t_scaled: Vec<f64>,
    pub t_raw: Vec<f64>,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
}

/// Everything needed to score a fit of simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub subject_ids: Vec<String>,
    pub labels: Vec<u8>,
    pub covariate_names: Vec<String>,
    pub logistic: LogisticParams,
    pub sigma2: f64,
    pub zeta: [VarianceComponents<f64>; 2],
    pub curves: CurveTable,
}

impl Truth {
    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A simulated dataset with its generating truth.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: LongitudinalDataset,
    pub truth: Truth,
}

/// Runs the whole generator.
pub fn simulate(design: &SimulationDesign) -> Result<Simulated> {
    design.validate()?;
    let x = generate_covariates(design, design.m)?;
    let labels = generate_labels(design, &x)?;
    let dataset = generate_trajectories(design, &labels, &x)?;
    let t_scaled = unit_grid(EVAL_GRID_POINTS);
    let t_raw = t_scaled.iter().map(|&t| dataset.unscale(t)).collect();
    let f1 = design.curves[0].prepare()?.eval(&t_scaled);
    let f2 = design.curves[1].prepare()?.eval(&t_scaled);
    let truth = Truth {
        subject_ids: dataset.subjects.iter().map(|s| s.subject_id.clone()).collect(),
        labels,
        covariate_names: design.covariate_names(),
        logistic: design.logistic_truth(),
        sigma2: design.sigma2,
        zeta: design.zeta,
        curves: CurveTable { t_scaled, t_raw, f1, f2 },
    };
    Ok(Simulated { dataset, truth })
}
