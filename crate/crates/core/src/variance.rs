//! Profiled-likelihood estimation of the variance components with mean
//! curves and posterior weights held fixed.
//!
//! With `V*_ik = V_ik / σ²` the error variance has the closed form
//! `σ̂² = Q / N`, `Q = Σ_i Σ_k w_ik r_ikᵀ V*_ik⁻¹ r_ik`, and the remaining
//! objective is `l_p = N log Q + Σ_i Σ_k w_ik log|V*_ik|`. Because `V*` only
//! depends on the ratios `ζ_k / σ²`, the optimizer works on the eight
//! coordinates of [`TransformedVarianceVector::relative`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{assemble_v_with_gram, GroupTransform, TransformedVarianceVector, VarianceComponents};
use crate::error::{Error, Result};
use crate::kernel::r1_gram;
use crate::lbfgsb::{minimize, LbfgsbOptions, Termination};
use crate::linalg::{Matrix, SymmetricEigen};

/// Error-variance estimates are floored here before use.
pub const SIGMA2_FLOOR: f64 = 1e-8;

/// Scaled times of one subject with their cached kernel Gram `R1(t, t)` and
/// its eigendecomposition `P Λ Pᵀ`. In the eigenbasis `V*` is a diagonal
/// plus a rank-two term, so its inverse and determinant cost `O(n)`.
#[derive(Debug, Clone)]
pub struct SubjectTimes {
    pub t: Vec<f64>,
    pub gram: Matrix<f64>,
    spectrum: Vec<f64>,
    basis: Matrix<f64>,
    /// `Pᵀ1` and `Pᵀt`.
    ones_rot: Vec<f64>,
    t_rot: Vec<f64>,
}

impl SubjectTimes {
    pub fn new(t: Vec<f64>) -> Result<Self> {
        let gram = r1_gram(&t);
        let eig = SymmetricEigen::new(&gram)?;
        let ones_rot = eig.vectors.t_matvec(&vec![1.0; t.len()])?;
        let t_rot = eig.vectors.t_matvec(&t)?;
        Ok(Self { t, gram, spectrum: eig.values, basis: eig.vectors, ones_rot, t_rot })
    }

    /// `Pᵀ r`.
    pub fn rotate(&self, r: &[f64]) -> Result<Vec<f64>> {
        self.basis.t_matvec(r)
    }

    /// `Pᵀ X`.
    pub fn rotate_matrix(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        self.basis.transpose().matmul(x)
    }

    /// `Pᵀ1` and `Pᵀt`.
    pub fn rotated_fixed_effects(&self) -> (&[f64], &[f64]) {
        (&self.ones_rot, &self.t_rot)
    }

    /// Woodbury pieces of `V*⁻¹` for the unit-error-variance components
    /// `ratio`.
    pub fn spectral_inverse(&self, ratio: &VarianceComponents<f64>) -> SpectralInverse {
        let sn = ratio.sigma2_non;
        let (u1, ut) = (&self.ones_rot, &self.t_rot);
        let n = self.t.len();
        let mut inv_d = vec![1.0; n];
        let mut logdet = 0.0;
        if sn != 0.0 {
            for (v, l) in inv_d.iter_mut().zip(&self.spectrum) {
                let d = 1.0 + sn * l;
                *v = 1.0 / d;
                logdet += d.ln();
            }
        }
        let (mut g11, mut g12, mut g22) = (0.0, 0.0, 0.0);
        for j in 0..n {
            g11 += u1[j] * u1[j] * inv_d[j];
            g12 += u1[j] * ut[j] * inv_d[j];
            g22 += ut[j] * ut[j] * inv_d[j];
        }
        let (a, b, c) = (ratio.sigma2_inter, ratio.sigma2_slope, ratio.sigma_is);
        // H = I + D G with D = [[a, c], [c, b]]; M = H⁻¹ D = (D⁻¹ + G)⁻¹
        let (e11, e12, e21, e22) = (1.0 + a * g11 + c * g12, a * g12 + c * g22, c * g11 + b * g12, 1.0 + c * g12 + b * g22);
        let det_h = e11 * e22 - e12 * e21;
        logdet += det_h.ln();
        let m11 = (e22 * a - e12 * c) / det_h;
        let m22 = (e11 * b - e21 * c) / det_h;
        let m12 = 0.5 * ((e22 * c - e12 * b) + (e11 * c - e21 * a)) / det_h;
        SpectralInverse { inv_d, g: [g11, g12, g22], m: [m11, m12, m22], logdet }
    }
}

/// `V*⁻¹ = D_s⁻¹ − D_s⁻¹ Ũ M Ũᵀ D_s⁻¹` in a subject's kernel eigenbasis, with
/// `D_s = diag(1 + σ_non λ)`, `Ũ = Pᵀ[1 t]` and `M = (D⁻¹ + G)⁻¹`.
#[derive(Debug, Clone)]
pub struct SpectralInverse {
    pub inv_d: Vec<f64>,
    /// `G = ŨᵀD_s⁻¹Ũ` as `(g11, g12, g22)`.
    pub g: [f64; 3],
    /// `M` as `(m11, m12, m22)`.
    pub m: [f64; 3],
    /// `log|V*|`.
    pub logdet: f64,
}

impl SpectralInverse {
    /// `M h` for a 2-vector `h`.
    #[inline]
    pub fn apply_m(&self, h: [f64; 2]) -> [f64; 2] {
        let [m11, m12, m22] = self.m;
        [m11 * h[0] + m12 * h[1], m12 * h[0] + m22 * h[1]]
    }

    /// `r̃ᵀ V*⁻¹ r̃` for a rotated vector, with `h = ŨᵀD_s⁻¹r̃`.
    pub fn quad_form(&self, s: &SubjectTimes, r: &[f64]) -> (f64, [f64; 2]) {
        let (mut h1, mut h2, mut rz) = (0.0, 0.0, 0.0);
        for j in 0..r.len() {
            let z = r[j] * self.inv_d[j];
            h1 += s.ones_rot[j] * z;
            h2 += s.t_rot[j] * z;
            rz += r[j] * z;
        }
        let mh = self.apply_m([h1, h2]);
        (rz - (h1 * mh[0] + h2 * mh[1]), [h1, h2])
    }
}

/// Fixed inputs of the variance step: group residuals `r_ik = y_i − f_k(t_i)`
/// and posterior weights.
#[derive(Debug, Clone, Copy)]
pub struct VarianceProblem<'a> {
    pub subjects: &'a [SubjectTimes],
    pub residuals: [&'a [Vec<f64>]; 2],
    pub weights: [&'a [f64]; 2],
    pub n_total: usize,
}

impl VarianceProblem<'_> {
    fn validate(&self) -> Result<()> {
        let m = self.subjects.len();
        for k in 0..2 {
            if self.residuals[k].len() != m || self.weights[k].len() != m {
                return Err(Error::Dimension("residual/weight blocks vs subjects".into()));
            }
            for (r, s) in self.residuals[k].iter().zip(self.subjects) {
                if r.len() != s.t.len() {
                    return Err(Error::Dimension("residual length vs subject times".into()));
                }
            }
            if self.weights[k].iter().any(|w| !(0.0..=1.0).contains(w)) {
                return Err(Error::InvalidParameter("weights must lie in [0, 1]".into()));
            }
        }
        if self.n_total == 0 {
            return Err(Error::InvalidParameter("no observations".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GradientMode {
    Analytic,
    ForwardDifference { step: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceOptions {
    /// Box `[−bound, bound]` on every relative transformed coordinate.
    pub bound: f64,
    pub gradient: GradientMode,
    pub lbfgsb: LbfgsbOptions,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        Self { bound: 12.0, gradient: GradientMode::Analytic, lbfgsb: LbfgsbOptions::default() }
    }
}

/// Sums over subjects of one group's quadratic and log-determinant terms and
/// their derivatives in the four relative coordinates.
#[derive(Debug, Clone, Copy, Default)]
struct GroupStats {
    q: f64,
    logdet: f64,
    dq: [f64; 4],
    dlogdet: [f64; 4],
}

impl std::ops::AddAssign for GroupStats {
    fn add_assign(&mut self, o: Self) {
        self.q += o.q;
        self.logdet += o.logdet;
        for j in 0..4 {
            self.dq[j] += o.dq[j];
            self.dlogdet[j] += o.dlogdet[j];
        }
    }
}

/// Residuals expressed in each subject's kernel eigenbasis.
struct Rotated<'a> {
    problem: &'a VarianceProblem<'a>,
    residuals: [Vec<Vec<f64>>; 2],
}

impl<'a> Rotated<'a> {
    fn new(problem: &'a VarianceProblem<'a>) -> Result<Self> {
        let rot = |k: usize| -> Result<Vec<Vec<f64>>> {
            problem.subjects.par_iter().zip(problem.residuals[k].par_iter()).map(|(s, r)| s.rotate(r)).collect()
        };
        Ok(Self { problem, residuals: [rot(0)?, rot(1)?] })
    }
}

/// One subject's contribution, computed in the eigenbasis of its kernel Gram
/// where every term reduces to a 2×2 system.
fn subject_stats(s: &SubjectTimes, r: &[f64], w: f64, rel: &GroupTransform<f64>, ratio: &VarianceComponents<f64>, grad: bool) -> GroupStats {
    let inv = s.spectral_inverse(ratio);
    let (q, h) = inv.quad_form(s, r);
    let mut out = GroupStats { q: w * q, logdet: w * inv.logdet, ..Default::default() };
    if !grad {
        return out;
    }
    let a = ratio.sigma2_inter;
    let b = ratio.sigma2_slope;
    let c = ratio.sigma_is;
    let sn = ratio.sigma2_non;
    let rho = rel.rho_unconstrained.tanh();
    let cu = (1.0 - rho * rho) * (a * b).sqrt();

    // ŨᵀV*⁻¹Ũ = G − G M G and ŨᵀV*⁻¹r = h − G M h
    let [g11, g12, g22] = inv.g;
    let [m11, m12, m22] = inv.m;
    let mh = inv.apply_m(h);
    let gm = [[g11 * m11 + g12 * m12, g11 * m12 + g12 * m22], [g12 * m11 + g22 * m12, g12 * m12 + g22 * m22]];
    let a11 = g11 - (gm[0][0] * g11 + gm[0][1] * g12);
    let a1t = g12 - (gm[0][0] * g12 + gm[0][1] * g22);
    let att = g22 - (gm[1][0] * g12 + gm[1][1] * g22);
    let al1 = h[0] - (g11 * mh[0] + g12 * mh[1]);
    let alt = h[1] - (g12 * mh[0] + g22 * mh[1]);

    let (mut tr_k, mut aka) = (0.0, 0.0);
    if sn != 0.0 {
        for j in 0..r.len() {
            let id = inv.inv_d[j];
            let (x1, x2) = (s.ones_rot[j] * id, s.t_rot[j] * id);
            let diag = id - (x1 * x1 * m11 + 2.0 * x1 * x2 * m12 + x2 * x2 * m22);
            tr_k += s.spectrum[j] * diag;
            let alpha = r[j] * id - (x1 * mh[0] + x2 * mh[1]);
            aka += s.spectrum[j] * alpha * alpha;
        }
    }

    // ∂V*/∂coord for (log inter, log slope, atanh ρ, log non)
    let tr = [a * a11 + c * a1t, b * att + c * a1t, 2.0 * cu * a1t, sn * tr_k];
    let quad = [a * al1 * al1 + c * al1 * alt, b * alt * alt + c * al1 * alt, 2.0 * cu * al1 * alt, sn * aka];
    for j in 0..4 {
        out.dq[j] = -w * quad[j];
        out.dlogdet[j] = w * tr[j];
    }
    out
}

fn group_stats(rot: &Rotated<'_>, k: usize, rel: &GroupTransform<f64>, grad: bool) -> Result<GroupStats> {
    let problem = rot.problem;
    let ratio = rel.to_components();
    let per: Vec<GroupStats> = (0..problem.subjects.len())
        .into_par_iter()
        .map(|i| {
            let w = problem.weights[k][i];
            if w == 0.0 {
                return GroupStats::default();
            }
            subject_stats(&problem.subjects[i], &rot.residuals[k][i], w, rel, &ratio, grad)
        })
        .collect();
    // sequential sum keeps results independent of thread scheduling
    let mut total = GroupStats::default();
    for s in per {
        total += s;
    }
    if !(total.q.is_finite() && total.logdet.is_finite()) {
        return Err(Error::NonFinite("profiled likelihood terms".into()));
    }
    Ok(total)
}

/// `Q`, `σ̂² = Q/N` (unfloored) and `l_p` at relative coordinates.
fn profile(rot: &Rotated<'_>, rel: &[GroupTransform<f64>; 2], grad: bool) -> Result<(f64, f64, Option<[f64; 8]>)> {
    let g = [group_stats(rot, 0, &rel[0], grad)?, group_stats(rot, 1, &rel[1], grad)?];
    let n = rot.problem.n_total as f64;
    let q = g[0].q + g[1].q;
    let value = n * q.ln() + g[0].logdet + g[1].logdet;
    let gradient = grad.then(|| {
        let mut out = [0.0; 8];
        for k in 0..2 {
            for j in 0..4 {
                out[4 * k + j] = n / q * g[k].dq[j] + g[k].dlogdet[j];
            }
        }
        out
    });
    Ok((value, q / n, gradient))
}

/// Closed-form `σ̂²` for the unit-error-variance covariances implied by `theta`
/// (unfloored; zero residuals give zero).
pub fn profile_sigma2(problem: &VarianceProblem<'_>, theta: &TransformedVarianceVector<f64>) -> Result<f64> {
    problem.validate()?;
    Ok(profile(&Rotated::new(problem)?, &theta.relative(), false)?.1)
}

/// Profiled objective with its gradient in the nine transformed coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfiledObjective {
    pub value: f64,
    pub sigma2_hat: f64,
    pub gradient: Vec<f64>,
}

fn relative_from(x: &[f64]) -> [GroupTransform<f64>; 2] {
    [
        GroupTransform::from_array([x[0], x[1], x[2], x[3]]),
        GroupTransform::from_array([x[4], x[5], x[6], x[7]]),
    ]
}

fn relative_to(rel: &[GroupTransform<f64>; 2]) -> Vec<f64> {
    let mut v = rel[0].to_array().to_vec();
    v.extend(rel[1].to_array());
    v
}

/// `l_p` and its gradient in the eight relative coordinates.
fn relative_objective(rot: &Rotated<'_>, x: &[f64], mode: GradientMode) -> Result<(f64, f64, Vec<f64>)> {
    let rel = relative_from(x);
    match mode {
        GradientMode::Analytic => {
            let (v, s2, g) = profile(rot, &rel, true)?;
            Ok((v, s2, g.expect("requested").to_vec()))
        }
        GradientMode::ForwardDifference { step } => {
            // one group's coordinates only touch that group's sums
            let base = [group_stats(rot, 0, &rel[0], false)?, group_stats(rot, 1, &rel[1], false)?];
            let n = rot.problem.n_total as f64;
            let lp = |g0: &GroupStats, g1: &GroupStats| n * (g0.q + g1.q).ln() + g0.logdet + g1.logdet;
            let value = lp(&base[0], &base[1]);
            let mut grad = vec![0.0; 8];
            for k in 0..2 {
                for j in 0..4 {
                    let mut a = rel[k].to_array();
                    a[j] += step;
                    let moved = group_stats(rot, k, &GroupTransform::from_array(a), false)?;
                    let v = if k == 0 { lp(&moved, &base[1]) } else { lp(&base[0], &moved) };
                    grad[4 * k + j] = (v - value) / step;
                }
            }
            Ok((value, (base[0].q + base[1].q) / n, grad))
        }
    }
}

/// `l_p` at `theta` with the gradient chosen by `mode`.
pub fn profiled_neg_loglik(problem: &VarianceProblem<'_>, theta: &TransformedVarianceVector<f64>, mode: GradientMode) -> Result<ProfiledObjective> {
    problem.validate()?;
    let x = relative_to(&theta.relative());
    let (value, sigma2_hat, g) = relative_objective(&Rotated::new(problem)?, &x, mode)?;
    // group log-variances enter as (coordinate − log σ²); ρ does not
    let shift: f64 = [0, 1, 3, 4, 5, 7].iter().map(|&j| g[j]).sum();
    let mut gradient = vec![-shift];
    gradient.extend(g);
    Ok(ProfiledObjective { value, sigma2_hat, gradient })
}

/// The unprofiled variance objective `Σ_i Σ_k w_ik (log|V_ik| + r_ikᵀ V_ik⁻¹ r_ik)`
/// assembled directly from natural-scale parameters.
pub fn full_objective(problem: &VarianceProblem<'_>, sigma2: f64, zeta: &[VarianceComponents<f64>; 2]) -> Result<f64> {
    problem.validate()?;
    let mut total = 0.0;
    for k in 0..2 {
        for (i, s) in problem.subjects.iter().enumerate() {
            let w = problem.weights[k][i];
            if w == 0.0 {
                continue;
            }
            let cov = assemble_v_with_gram(&s.t, Some(&s.gram), &zeta[k], sigma2)?;
            total += w * (cov.log_det() + cov.quad_form(&problem.residuals[k][i]));
        }
    }
    Ok(total)
}

/// Outcome of [`optimize_variances`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceFit {
    /// Optimized parameters with `σ²` set to the floored closed form.
    pub theta: TransformedVarianceVector<f64>,
    pub value: f64,
    pub start_value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

/// Index of the group that label-independent computations treat first: the
/// one with the larger total weight (ties broken by a position-weighted sum).
/// Swapping the weight columns swaps the answer, which makes swapped runs
/// perform bitwise-identical arithmetic.
pub fn leading_group(weights: [&[f64]; 2]) -> usize {
    let key = |w: &[f64]| {
        let total: f64 = w.iter().sum();
        let spread: f64 = w.iter().enumerate().map(|(i, v)| v * (i + 1) as f64).sum();
        (total, spread)
    };
    let (a, b) = (key(weights[0]), key(weights[1]));
    if b.0 > a.0 || (b.0 == a.0 && b.1 > a.1) {
        1
    } else {
        0
    }
}

/// Minimizes `l_p` over the relative coordinates inside the box, starting
/// from `start`; `σ²` is then set to `max(σ̂², SIGMA2_FLOOR)`. The result is
/// never worse than `start` itself, even when `start` lies outside the box.
pub fn optimize_variances(problem: &VarianceProblem<'_>, start: &TransformedVarianceVector<f64>, opts: &VarianceOptions) -> Result<VarianceFit> {
    problem.validate()?;
    if !(opts.bound > 0.0) {
        return Err(Error::InvalidParameter("variance bound must be positive".into()));
    }
    if leading_group(problem.weights) == 1 {
        let swapped = VarianceProblem {
            residuals: [problem.residuals[1], problem.residuals[0]],
            weights: [problem.weights[1], problem.weights[0]],
            ..*problem
        };
        let mut fit = optimize_ordered(&swapped, &start.swapped(), opts)?;
        fit.theta = fit.theta.swapped();
        return Ok(fit);
    }
    optimize_ordered(problem, start, opts)
}

fn optimize_ordered(problem: &VarianceProblem<'_>, start: &TransformedVarianceVector<f64>, opts: &VarianceOptions) -> Result<VarianceFit> {
    let rot = Rotated::new(problem)?;
    let raw = relative_to(&start.relative());
    let x0: Vec<f64> = raw.iter().map(|v| v.clamp(-opts.bound, opts.bound)).collect();
    let (start_value, _, _) = relative_objective(&rot, &x0, GradientMode::Analytic)
        .map_err(|e| Error::NonFinite(format!("profiled likelihood at the start: {e}")))?;
    if !start_value.is_finite() {
        return Err(Error::NonFinite("profiled likelihood at the start".into()));
    }
    let lower = vec![-opts.bound; 8];
    let upper = vec![opts.bound; 8];
    let res = minimize(
        |x| relative_objective(&rot, x, opts.gradient).map(|(v, _, g)| (v, g)),
        &x0,
        &lower,
        &upper,
        &opts.lbfgsb,
    )?;
    let mut best = res.x;
    let mut start_value = start_value;
    if raw != x0 {
        if let Ok((v, _, _)) = profile(&rot, &relative_from(&raw), false) {
            if v.is_finite() {
                start_value = v;
                if v < res.f {
                    best = raw;
                }
            }
        }
    }
    let rel = relative_from(&best);
    let (value, sigma2, _) = profile(&rot, &rel, false)?;
    let sigma2 = sigma2.max(SIGMA2_FLOOR);
    Ok(VarianceFit {
        theta: TransformedVarianceVector::from_relative(sigma2.ln(), &rel),
        value,
        start_value,
        iterations: res.iterations,
        evaluations: res.evaluations,
        termination: res.termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    struct Instance {
        subjects: Vec<SubjectTimes>,
        residuals: [Vec<Vec<f64>>; 2],
        weights: [Vec<f64>; 2],
        n_total: usize,
    }

    impl Instance {
        fn problem(&self) -> VarianceProblem<'_> {
            VarianceProblem {
                subjects: &self.subjects,
                residuals: [&self.residuals[0], &self.residuals[1]],
                weights: [&self.weights[0], &self.weights[1]],
                n_total: self.n_total,
            }
        }
    }

    fn random_instance(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Instance {
        let subjects: Vec<SubjectTimes> = (0..m)
            .map(|_| {
                let mut t: Vec<f64> = (0..n).map(|_| rng.random()).collect();
                t.sort_by(f64::total_cmp);
                SubjectTimes::new(t).unwrap()
            })
            .collect();
        let residuals = [0, 1].map(|_| (0..m).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect());
        let w1: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..0.99)).collect();
        let w2 = w1.iter().map(|w| 1.0 - w).collect();
        Instance { subjects, residuals, weights: [w1, w2], n_total: m * n }
    }

    /// Subjects drawn exactly from the marginal model of group 1.
    fn simulate_group(rng: &mut ChaCha8Rng, m: usize, zeta: &VarianceComponents<f64>, sigma2: f64) -> Instance {
        let mut subjects = Vec::new();
        let mut res = Vec::new();
        for _ in 0..m {
            let n = rng.random_range(16..=31);
            let mut days: Vec<i32> = (-30..=0).collect();
            for i in (1..days.len()).rev() {
                days.swap(i, rng.random_range(0..=i));
            }
            let mut t: Vec<f64> = days[..n].iter().map(|d| (*d as f64 + 30.0) / 30.0).collect();
            t.sort_by(f64::total_cmp);
            let s = SubjectTimes::new(t).unwrap();
            let cov = assemble_v_with_gram(&s.t, Some(&s.gram), zeta, sigma2).unwrap();
            let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let l = cov.cholesky().lower();
            let y: Vec<f64> = (0..n).map(|i| (0..=i).map(|j| l[(i, j)] * z[j]).sum()).collect();
            res.push(y);
            subjects.push(s);
        }
        let total = subjects.iter().map(|s| s.t.len()).sum();
        Instance { residuals: [res.clone(), res], weights: [vec![1.0; m], vec![0.0; m]], subjects, n_total: total }
    }

    fn theta(v: [f64; 9]) -> TransformedVarianceVector<f64> {
        TransformedVarianceVector::from_slice(&v).unwrap()
    }

    #[test]
    fn spectral_terms_match_dense_factorization() {
        use crate::covariance::fill_v;
        use crate::linalg::{dot, Cholesky};
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..40 {
            let n = rng.random_range(1..=31);
            let mut t: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            t.sort_by(f64::total_cmp);
            let s = SubjectTimes::new(t).unwrap();
            let r: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let coords = if case < 4 {
                [[12.0, -12.0, 12.0, 12.0], [-12.0, 12.0, -12.0, -12.0], [12.0, 12.0, 3.0, -12.0], [-12.0, -12.0, 0.0, 12.0]][case]
            } else {
                [0; 4].map(|_| rng.random_range(-6.0..6.0))
            };
            let rel = GroupTransform::from_array(coords);
            let ratio = rel.to_components();
            let got = subject_stats(&s, &s.rotate(&r).unwrap(), 1.0, &rel, &ratio, false);
            let mut v = Matrix::zeros(n, n);
            fill_v(&mut v, &s.t, Some(&s.gram), &ratio, 1.0);
            let chol = Cholesky::new(&v).unwrap();
            let q = dot(&r, &chol.solve(&r));
            assert_relative_eq!(got.q, q, max_relative = 1e-7, epsilon = 1e-10);
            assert_relative_eq!(got.logdet, chol.log_det(), max_relative = 1e-9, epsilon = 1e-9);
        }
    }

    #[test]
    fn identity_covariance_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = random_instance(&mut rng, 1, 5);
        let mut inst = inst;
        inst.weights = [vec![1.0], vec![0.0]];
        let th = theta([0.0, -30.0, -30.0, 0.0, -30.0, -30.0, -30.0, 0.0, -30.0]);
        let s2 = profile_sigma2(&inst.problem(), &th).unwrap();
        let rr: f64 = inst.residuals[0][0].iter().map(|v| v * v).sum();
        assert_relative_eq!(s2, rr / 5.0, max_relative = 1e-10);
        let lp = profiled_neg_loglik(&inst.problem(), &th, GradientMode::Analytic).unwrap();
        assert_relative_eq!(lp.value, 5.0 * rr.ln(), max_relative = 1e-10);
    }

    #[test]
    fn zero_residuals_give_zero_sigma2() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut inst = random_instance(&mut rng, 3, 4);
        for k in 0..2 {
            for r in inst.residuals[k].iter_mut() {
                r.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        assert_eq!(profile_sigma2(&inst.problem(), &theta([0.0; 9])).unwrap(), 0.0);
    }

    #[test]
    fn doubling_residuals_adds_n_log_4() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut inst = random_instance(&mut rng, 4, 6);
        let th = theta([0.1, -1.0, -2.0, 0.3, 0.5, -0.5, 0.2, -0.4, 1.0]);
        let a = profiled_neg_loglik(&inst.problem(), &th, GradientMode::Analytic).unwrap().value;
        for k in 0..2 {
            for r in inst.residuals[k].iter_mut() {
                r.iter_mut().for_each(|v| *v *= 2.0);
            }
        }
        let b = profiled_neg_loglik(&inst.problem(), &th, GradientMode::Analytic).unwrap().value;
        assert_relative_eq!(b - a, 24.0 * 4f64.ln(), epsilon = 1e-9);
    }

    fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        while b - a > 1e-12 * (a.abs() + b.abs()) {
            let x1 = b - r * (b - a);
            let x2 = a + r * (b - a);
            if f(x1) < f(x2) {
                b = x2;
            } else {
                a = x1;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn closed_form_sigma2_matches_one_dimensional_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 3, 4);
            let v: [f64; 9] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let rel = theta(v).relative();
            let ratio = [rel[0].to_components(), rel[1].to_components()];
            let s2 = profile_sigma2(&inst.problem(), &theta(v)).unwrap();
            // unprofiled objective along σ² with V* fixed
            let f = |ls2: f64| {
                let s2 = ls2.exp();
                full_objective(&inst.problem(), s2, &[ratio[0].scaled(s2), ratio[1].scaled(s2)]).unwrap()
            };
            let best = golden_min(f, -10.0, 10.0).exp();
            assert_relative_eq!(s2, best, max_relative = 1e-6);
        }
    }

    #[test]
    fn profiled_differences_match_full_objective_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 3, 5);
            let p = inst.problem();
            let mut eval = || {
                let v: [f64; 9] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
                let th = theta(v);
                let lp = profiled_neg_loglik(&p, &th, GradientMode::Analytic).unwrap();
                let rel = th.relative();
                let s2 = lp.sigma2_hat;
                let full = full_objective(&p, s2, &[rel[0].to_components().scaled(s2), rel[1].to_components().scaled(s2)]).unwrap();
                (lp.value, full)
            };
            let (a, fa) = eval();
            let (b, fb) = eval();
            assert_relative_eq!(a - b, fa - fb, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inst = random_instance(&mut rng, 6, 8);
        let p = inst.problem();
        let th = theta([-0.5, -1.0, -0.3, 0.4, 1.5, 0.2, -1.0, -0.6, 0.7]);
        let h = 1e-4;
        let central: Vec<f64> = (0..9)
            .map(|j| {
                let mut a = th.to_vec();
                let mut b = th.to_vec();
                a[j] += h;
                b[j] -= h;
                let fa = profiled_neg_loglik(&p, &theta(a.try_into().unwrap()), GradientMode::Analytic).unwrap().value;
                let fb = profiled_neg_loglik(&p, &theta(b.try_into().unwrap()), GradientMode::Analytic).unwrap().value;
                (fa - fb) / (2.0 * h)
            })
            .collect();
        for mode in [GradientMode::Analytic, GradientMode::ForwardDifference { step: 1e-5 }] {
            let g = profiled_neg_loglik(&p, &th, mode).unwrap().gradient;
            for j in 0..9 {
                assert_relative_eq!(g[j], central[j], max_relative = 1e-3, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn label_swap_and_subject_order_leave_objective_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inst = random_instance(&mut rng, 5, 6);
        let th = theta([0.2, -1.0, 0.5, 0.1, 0.3, -2.0, -0.5, 0.9, -1.0]);
        let a = profiled_neg_loglik(&inst.problem(), &th, GradientMode::Analytic).unwrap().value;
        let swapped = Instance {
            subjects: inst.subjects.clone(),
            residuals: [inst.residuals[1].clone(), inst.residuals[0].clone()],
            weights: [inst.weights[1].clone(), inst.weights[0].clone()],
            n_total: inst.n_total,
        };
        let b = profiled_neg_loglik(&swapped.problem(), &th.swapped(), GradientMode::Analytic).unwrap().value;
        assert_relative_eq!(a, b, max_relative = 1e-13);
        let order = [3usize, 0, 4, 2, 1];
        let perm = Instance {
            subjects: order.iter().map(|&i| inst.subjects[i].clone()).collect(),
            residuals: [0, 1].map(|k| order.iter().map(|&i| inst.residuals[k][i].clone()).collect()),
            weights: [0, 1].map(|k| order.iter().map(|&i| inst.weights[k][i]).collect()),
            n_total: inst.n_total,
        };
        let c = profiled_neg_loglik(&perm.problem(), &th, GradientMode::Analytic).unwrap().value;
        assert_relative_eq!(a, c, max_relative = 1e-13);
    }

    fn table1_group1() -> VarianceComponents<f64> {
        VarianceComponents { sigma2_inter: 0.0958, sigma_is: -0.0817, sigma2_slope: 0.5125, sigma2_non: 14.5024 }
    }

    #[test]
    fn starting_at_the_truth_never_gets_worse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inst = simulate_group(&mut rng, 40, &table1_group1(), 0.4142);
        let th = TransformedVarianceVector::from_natural(0.4142, &[table1_group1(), table1_group1()]).unwrap();
        let fit = optimize_variances(&inst.problem(), &th, &VarianceOptions::default()).unwrap();
        assert!(fit.value <= fit.start_value);
    }

    #[test]
    fn absent_smooth_effect_is_pinned_low() {
        let zeta = VarianceComponents { sigma2_non: 0.0, ..table1_group1() };
        let mut pinned = 0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let inst = simulate_group(&mut rng, 100, &zeta, 0.4142);
            let fit = optimize_variances(&inst.problem(), &theta([0.0; 9]), &VarianceOptions::default()).unwrap();
            if fit.theta.to_natural().1[0].sigma2_non <= 1e-4 {
                pinned += 1;
            } else {
                // an interior estimate must beat the bound
                let mut rel = fit.theta.relative();
                rel[0].log_sigma2_non = -12.0;
                let th = TransformedVarianceVector::from_relative(0.0, &rel);
                let at_bound = profiled_neg_loglik(&inst.problem(), &th, GradientMode::Analytic).unwrap().value;
                assert!(fit.value < at_bound, "seed {seed}: stopped short of the bound");
            }
        }
        assert!(pinned >= 5, "{pinned}/10");
    }

    #[test]
    fn recovers_error_variance_at_table_one_values() {
        let mut hits = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let inst = simulate_group(&mut rng, 200, &table1_group1(), 0.4142);
            let fit = optimize_variances(&inst.problem(), &theta([0.0; 9]), &VarianceOptions::default()).unwrap();
            let s2 = fit.theta.to_natural().0;
            if (0.38..=0.45).contains(&s2) {
                hits += 1;
            }
        }
        assert!(hits >= 18, "{hits}/20");
    }
}
