//! Fitting configuration, loadable from TOML. Every field has a default, so
//! a config file only needs the values it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::covariance::WEIGHT_FLOOR;
use crate::error::{Error, Result};
use crate::kernel::DEFAULT_KNOT_CAP;
use crate::lasso::CvOptions;
use crate::spline::LambdaSearch;
use crate::variance::VarianceOptions;

/// Stopping constants of the EM iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingConfig {
    /// Denominator offset of the outer relative change.
    pub kappa1: f64,
    /// Denominator offset of the inner relative change.
    pub kappa2: f64,
    /// Outer loop stops once the relative change is at most this.
    pub d_em: f64,
    /// Inner loop stops once the relative change is at most this.
    pub d_inner: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        Self { kappa1: 1e-5, kappa2: 1e-5, d_em: 1e-5, d_inner: 1e-5, max_outer: 100, max_inner: 5 }
    }
}

impl StoppingConfig {
    pub fn validate(&self) -> Result<()> {
        let reals = [self.kappa1, self.kappa2, self.d_em, self.d_inner];
        if reals.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::InvalidParameter("stopping constants must all be positive".into()));
        }
        Ok(())
    }
}

/// Everything that controls a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub stopping: StoppingConfig,
    /// Maximum number of spline knots.
    pub knot_cap: usize,
    pub lambda_search: LambdaSearch,
    pub cv: CvOptions,
    pub variance: VarianceOptions,
    /// Posterior weights are floored here (rows renormalized).
    pub weight_floor: f64,
    /// Subjects with `w_i1 ≥ threshold` are classified into group 1.
    pub threshold: f64,
    /// Seed of the random initial assignment.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            stopping: StoppingConfig::default(),
            knot_cap: DEFAULT_KNOT_CAP,
            lambda_search: LambdaSearch::default(),
            cv: CvOptions::default(),
            variance: VarianceOptions::default(),
            weight_floor: WEIGHT_FLOOR,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.stopping.validate()?;
        self.lambda_search.validate()?;
        if self.knot_cap < 1 {
            return Err(Error::InvalidParameter("knot_cap must be at least 1".into()));
        }
        if self.cv.n_folds < 2 || self.cv.grid_len == 0 || !(self.cv.min_ratio > 0.0 && self.cv.min_ratio <= 1.0) {
            return Err(Error::InvalidParameter("cv needs >= 2 folds, a nonempty grid and min_ratio in (0, 1]".into()));
        }
        if !(self.weight_floor >= WEIGHT_FLOOR && self.weight_floor < 0.5) {
            return Err(Error::InvalidParameter(format!("weight_floor must lie in [{WEIGHT_FLOOR}, 0.5)")));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidParameter("threshold must lie in (0, 1)".into()));
        }
        if !(self.variance.bound > 0.0) {
            return Err(Error::InvalidParameter("variance bound must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = FitConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(FitConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_keep_defaults() {
        let cfg = FitConfig::from_toml_str("seed = 9\n[stopping]\nmax_inner = 1\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.stopping.max_inner, 1);
        assert_eq!(cfg.stopping.d_em, 1e-5);
        assert_eq!(cfg.threshold, 0.5);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(FitConfig::from_toml_str("threshold = 1.5").is_err());
        assert!(FitConfig::from_toml_str("[stopping]\nd_em = 0.0").is_err());
        assert!(FitConfig::from_toml_str("unknown_key = 1").is_err());
        assert!(FitConfig::from_toml_str("weight_floor = 1e-12").is_err());
    }
}
