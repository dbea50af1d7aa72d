//! Scoring of a fit against the truth of a simulated dataset.

use serde::{Deserialize, Serialize};

use crate::em::FitReport;
use crate::error::{Error, Result};
use crate::simulate::Truth;

/// Agreement of a fit with the generating truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    /// Share of correctly classified subjects under the better of the two
    /// label mappings.
    pub accuracy: f64,
    /// Whether fitted group 1 was matched to true group 2.
    pub swapped: bool,
    /// Mean squared error of each true curve's matched estimate on the
    /// evaluation grid, in true-group order.
    pub curve_mse: [f64; 2],
    /// Selected covariates whose true coefficient is zero.
    pub false_included: Vec<String>,
    /// Covariates with a nonzero true coefficient that were not selected.
    pub false_excluded: Vec<String>,
}

/// Accuracy under the best label mapping and whether that mapping swaps.
pub fn aligned_accuracy(estimated: &[u8], truth: &[u8]) -> Result<(f64, bool)> {
    if estimated.len() != truth.len() || truth.is_empty() {
        return Err(Error::Dimension("label vectors differ in length or are empty".into()));
    }
    let agree = estimated.iter().zip(truth).filter(|(a, b)| a == b).count();
    let m = truth.len();
    Ok(if agree >= m - agree { (agree as f64 / m as f64, false) } else { ((m - agree) as f64 / m as f64, true) })
}

/// Unweighted mean of squared differences.
pub fn curve_mse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() || truth.is_empty() {
        return Err(Error::Dimension("curve grids differ in length or are empty".into()));
    }
    Ok(estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / truth.len() as f64)
}

/// Selection errors of `selected` against the nonzero truth coefficients.
pub fn selection_errors(selected: &[String], truth: &Truth) -> (Vec<String>, Vec<String>) {
    let active: Vec<&String> = truth.covariate_names.iter().zip(&truth.logistic.beta1).filter(|(_, b)| **b != 0.0).map(|(n, _)| n).collect();
    let false_included = selected.iter().filter(|n| !active.contains(n)).cloned().collect();
    let false_excluded = active.into_iter().filter(|n| !selected.contains(n)).cloned().collect();
    (false_included, false_excluded)
}

/// Scores `report` (whose curves and labels are judged) with `selected` as
/// the covariates chosen by variable selection. Curves are compared at the
/// truth's raw grid times, mapped through the fit's own time scaling.
pub fn score(report: &FitReport, selected: &[String], truth: &Truth) -> Result<Score> {
    if report.subject_ids != truth.subject_ids {
        return Err(Error::InvalidParameter("subject ids of the fit and the truth differ".into()));
    }
    let (accuracy, swapped) = aligned_accuracy(&report.classifications, &truth.labels)?;
    let (a, b) = report.scaling;
    let t: Vec<f64> = truth.curves.t_raw.iter().map(|r| (r - a) / (b - a)).collect();
    let fitted = report.curves_at(&t);
    let (f1, f2) = if swapped { (&fitted[1], &fitted[0]) } else { (&fitted[0], &fitted[1]) };
    let curve_mse = [curve_mse(f1, &truth.curves.f1)?, curve_mse(f2, &truth.curves.f2)?];
    let (false_included, false_excluded) = selection_errors(selected, truth);
    Ok(Score { accuracy, swapped, curve_mse, false_included, false_excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lasso::LogisticParams;
    use crate::simulate::CurveTable;

    fn truth() -> Truth {
        Truth {
            subject_ids: vec!["a".into(), "b".into()],
            labels: vec![1, 2],
            covariate_names: vec!["x".into(), "y".into(), "z".into()],
            logistic: LogisticParams { beta0: 0.0, beta1: vec![0.5, 0.0, -1.0], lambda0: 0.0 },
            sigma2: 1.0,
            zeta: [crate::covariance::VarianceComponents::zero(); 2],
            curves: CurveTable { t_scaled: vec![0.0, 1.0], t_raw: vec![0.0, 1.0], f1: vec![1.0, 1.0], f2: vec![0.0, 0.0] },
        }
    }

    #[test]
    fn accuracy_uses_the_better_mapping() {
        assert_eq!(aligned_accuracy(&[1, 2, 2, 1], &[1, 2, 2, 1]).unwrap(), (1.0, false));
        assert_eq!(aligned_accuracy(&[2, 1, 1, 2], &[1, 2, 2, 1]).unwrap(), (1.0, true));
        assert_eq!(aligned_accuracy(&[1, 1, 2, 2], &[1, 2, 2, 2]).unwrap(), (0.75, false));
        assert_eq!(aligned_accuracy(&[1, 2], &[1, 2]).unwrap().0, 1.0);
        assert!(aligned_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn identical_curves_have_zero_error() {
        assert_eq!(curve_mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(curve_mse(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
    }

    #[test]
    fn selection_errors_count_both_directions() {
        let t = truth();
        let (inc, exc) = selection_errors(&["x".into(), "y".into()], &t);
        assert_eq!(inc, vec!["y".to_string()]);
        assert_eq!(exc, vec!["z".to_string()]);
        let (inc, exc) = selection_errors(&["x".into(), "z".into()], &t);
        assert!(inc.is_empty() && exc.is_empty());
    }

    #[test]
    fn fitted_separated_groups_score_perfectly() {
        use crate::config::FitConfig;
        use crate::em::{run_em, FitMode, Init, Workspace};
        use crate::simulate::{simulate, MeanCurve, SimulationDesign};
        let mut design = SimulationDesign::reference(60, 3, false);
        design.curves = [MeanCurve::Constant { value: 0.0 }, MeanCurve::Constant { value: 4.0 }];
        let sim = simulate(&design).unwrap();
        let ws = Workspace::from_dataset(&sim.dataset, 64).unwrap();
        let report = run_em(&ws, &FitConfig::default(), Init::Random { seed: 1 }, FitMode::Penalized).unwrap();
        let s = score(&report, report.membership_covariates(), &sim.truth).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert!(s.curve_mse[0] < 0.05 && s.curve_mse[1] < 0.05, "{:?}", s.curve_mse);
        let mut other = sim.truth.clone();
        other.subject_ids[0] = "nobody".into();
        assert!(score(&report, &[], &other).is_err());
    }
}
