//! Bound-constrained limited-memory BFGS (L-BFGS-B) for small problems.
//!
//! Each iteration computes the generalized Cauchy point of the quadratic
//! model along the projected steepest-descent path, minimizes the model over
//! the variables left free there (truncated to the box), and runs a
//! strong-Wolfe line search along the resulting direction. The limited-memory
//! matrix is kept dense because the problems here have fewer than a dozen
//! variables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Cholesky, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsbOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the projected gradient's infinity norm is below this.
    pub pgtol: f64,
    /// Stop when the relative reduction of `f` is below `factr · eps`.
    pub factr: f64,
}

impl Default for LbfgsbOptions {
    fn default() -> Self {
        Self { memory: 10, max_iterations: 200, pgtol: 1e-5, factr: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ProjectedGradient,
    RelativeReduction,
    IterationLimit,
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbfgsbResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

/// Infinity norm of `P(x − g) − x`.
pub fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&l, &u))| ((xi - gi).clamp(l, u) - xi).abs())
        .fold(0.0, f64::max)
}

struct Memory {
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    cap: usize,
}

impl Memory {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        if self.s.len() == self.cap {
            self.s.remove(0);
            self.y.remove(0);
        }
        self.s.push(s);
        self.y.push(y);
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
    }

    /// Dense BFGS matrix from `θI` updated with the stored pairs.
    fn matrix(&self, n: usize) -> Matrix<f64> {
        let theta = match (self.s.last(), self.y.last()) {
            (Some(s), Some(y)) => dot(y, y) / dot(s, y),
            _ => 1.0,
        };
        let mut b = Matrix::identity(n).scaled(theta);
        for (s, y) in self.s.iter().zip(&self.y) {
            let bs = b.matvec(s).expect("dimension");
            let sbs = dot(s, &bs);
            let sy = dot(s, y);
            for i in 0..n {
                for j in 0..n {
                    b[(i, j)] += y[i] * y[j] / sy - bs[i] * bs[j] / sbs;
                }
            }
        }
        b
    }
}

/// Generalized Cauchy point: first local minimizer of the quadratic model
/// `gᵀd + ½dᵀBd` along `P(x − t g)`.
fn cauchy_point(x: &[f64], g: &[f64], b: &Matrix<f64>, lower: &[f64], upper: &[f64]) -> Vec<f64> {
    let n = x.len();
    let breaks: Vec<f64> = (0..n)
        .map(|i| {
            if g[i] < 0.0 {
                (x[i] - upper[i]) / g[i]
            } else if g[i] > 0.0 {
                (x[i] - lower[i]) / g[i]
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).filter(|&i| breaks[i] > 0.0).collect();
    order.sort_by(|&a, &c| breaks[a].total_cmp(&breaks[c]));

    let mut d: Vec<f64> = (0..n).map(|i| if breaks[i] > 0.0 { -g[i] } else { 0.0 }).collect();
    let mut xc = x.to_vec();
    // model along the segment: f'(t) = fp + fpp·(t − t_prev)
    let mut z = vec![0.0; n];
    let mut t_prev = 0.0;
    let bd = b.matvec(&d).expect("dimension");
    let mut fp = dot(g, &d);
    let mut fpp = dot(&d, &bd);
    for &i in &order {
        let tb = breaks[i];
        if fpp > 0.0 && -fp / fpp < tb - t_prev {
            let dt = (-fp / fpp).max(0.0);
            for j in 0..n {
                xc[j] = x[j] + z[j] + dt * d[j];
            }
            return clip(xc, lower, upper);
        }
        if fp >= 0.0 {
            for j in 0..n {
                xc[j] = x[j] + z[j];
            }
            return clip(xc, lower, upper);
        }
        let dt = tb - t_prev;
        for j in 0..n {
            z[j] += dt * d[j];
        }
        // variable i hits its bound and leaves the path
        let zi_bound = if d[i] > 0.0 { upper[i] - x[i] } else { lower[i] - x[i] };
        z[i] = zi_bound;
        let bz = b.matvec(&z).expect("dimension");
        d[i] = 0.0;
        let bd = b.matvec(&d).expect("dimension");
        fp = dot(g, &d) + dot(&d, &bz);
        fpp = dot(&d, &bd);
        t_prev = tb;
        if d.iter().all(|v| *v == 0.0) {
            break;
        }
    }
    if fpp > 0.0 && fp < 0.0 {
        let dt = -fp / fpp;
        for j in 0..n {
            xc[j] = x[j] + z[j] + dt * d[j];
        }
    } else {
        for j in 0..n {
            xc[j] = x[j] + z[j];
        }
    }
    clip(xc, lower, upper)
}

fn clip(mut x: Vec<f64>, lower: &[f64], upper: &[f64]) -> Vec<f64> {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
    x
}

/// Minimizes the model over variables free at the Cauchy point, truncating
/// the step to stay inside the box.
fn subspace_minimum(x: &[f64], g: &[f64], b: &Matrix<f64>, xc: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    let n = x.len();
    let free: Vec<usize> = (0..n).filter(|&i| xc[i] > lower[i] && xc[i] < upper[i]).collect();
    if free.is_empty() {
        return xc.to_vec();
    }
    let dc: Vec<f64> = (0..n).map(|i| xc[i] - x[i]).collect();
    let bdc = b.matvec(&dc).expect("dimension");
    let rhs: Vec<f64> = free.iter().map(|&i| -(g[i] + bdc[i])).collect();
    let bff = Matrix::from_fn(free.len(), free.len(), |a, c| b[(free[a], free[c])]);
    let du = match Cholesky::with_jitter(&bff) {
        Ok(ch) => ch.solve(&rhs),
        Err(_) => return xc.to_vec(),
    };
    let mut alpha: f64 = 1.0;
    for (k, &i) in free.iter().enumerate() {
        if du[k] > 0.0 {
            alpha = alpha.min((upper[i] - xc[i]) / du[k]);
        } else if du[k] < 0.0 {
            alpha = alpha.min((lower[i] - xc[i]) / du[k]);
        }
    }
    let mut out = xc.to_vec();
    for (k, &i) in free.iter().enumerate() {
        out[i] += alpha.max(0.0) * du[k];
    }
    clip(out, lower, upper)
}

struct Evaluator<'a, F> {
    f: &'a mut F,
    count: usize,
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Evaluator<'_, F> {
    /// Non-finite values and evaluation errors read as `+∞`.
    fn eval(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self.count += 1;
        match (self.f)(x) {
            Ok((v, g)) if v.is_finite() && g.iter().all(|gi| gi.is_finite()) => (v, g),
            _ => (f64::INFINITY, vec![0.0; x.len()]),
        }
    }
}

struct LinePoint {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

struct Ray<'a> {
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    dphi0: f64,
    lower: &'a [f64],
    upper: &'a [f64],
}

impl Ray<'_> {
    fn at<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>>(&self, ev: &mut Evaluator<'_, F>, a: f64) -> LinePoint {
        let xa = clip(self.x.iter().zip(self.d).map(|(xi, di)| xi + a * di).collect(), self.lower, self.upper);
        let (f, g) = ev.eval(&xa);
        LinePoint { alpha: a, x: xa, f, g }
    }

    fn slope(&self, p: &LinePoint) -> f64 {
        dot(&p.g, self.d)
    }

    fn armijo(&self, p: &LinePoint) -> bool {
        p.f <= self.f0 + C1 * p.alpha * self.dphi0
    }

    fn curvature(&self, slope: f64) -> bool {
        slope.abs() <= -C2 * self.dphi0
    }
}

/// Strong-Wolfe search on `α ∈ (0, alpha_max]`.
fn line_search<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>>(
    ev: &mut Evaluator<'_, F>,
    ray: &Ray<'_>,
    alpha_init: f64,
    alpha_max: f64,
) -> Option<LinePoint> {
    let mut prev = LinePoint { alpha: 0.0, x: ray.x.to_vec(), f: ray.f0, g: vec![] };
    let mut prev_slope = ray.dphi0;
    let mut a = alpha_init.min(alpha_max);
    for i in 0..30 {
        let cur = ray.at(ev, a);
        if !ray.armijo(&cur) || (i > 0 && cur.f >= prev.f) {
            return zoom(ev, ray, prev, prev_slope, cur);
        }
        let ds = ray.slope(&cur);
        if ray.curvature(ds) {
            return Some(cur);
        }
        if ds >= 0.0 {
            return zoom(ev, ray, cur, ds, prev);
        }
        if a >= alpha_max {
            return Some(cur);
        }
        a = (2.0 * a).min(alpha_max);
        prev_slope = ds;
        prev = cur;
    }
    (prev.alpha > 0.0 && ray.armijo(&prev)).then_some(prev)
}

/// Shrinks a bracket whose `lo` end satisfies sufficient decrease.
fn zoom<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>>(
    ev: &mut Evaluator<'_, F>,
    ray: &Ray<'_>,
    mut lo: LinePoint,
    mut lo_slope: f64,
    mut hi: LinePoint,
) -> Option<LinePoint> {
    for _ in 0..40 {
        let (a_lo, a_hi) = (lo.alpha, hi.alpha);
        if (a_hi - a_lo).abs() <= 1e-14 * a_lo.abs().max(a_hi.abs()).max(1e-20) {
            break;
        }
        // quadratic through (lo, lo_slope) and hi, safeguarded to the bracket interior
        let denom = 2.0 * (hi.f - lo.f - lo_slope * (a_hi - a_lo));
        let mut a = if hi.f.is_finite() && denom > 0.0 {
            a_lo - lo_slope * (a_hi - a_lo) * (a_hi - a_lo) / denom
        } else {
            0.5 * (a_lo + a_hi)
        };
        let (mn, mx) = (a_lo.min(a_hi), a_lo.max(a_hi));
        let margin = 0.1 * (mx - mn);
        if !a.is_finite() || a < mn + margin || a > mx - margin {
            a = 0.5 * (a_lo + a_hi);
        }
        let cur = ray.at(ev, a);
        if !ray.armijo(&cur) || cur.f >= lo.f {
            hi = cur;
            continue;
        }
        let ds = ray.slope(&cur);
        if ray.curvature(ds) {
            return Some(cur);
        }
        if ds * (a_hi - a_lo) >= 0.0 {
            hi = std::mem::replace(&mut lo, cur);
        } else {
            lo = cur;
        }
        lo_slope = ds;
    }
    (lo.alpha > 0.0 && ray.armijo(&lo)).then_some(lo)
}

/// Minimizes `f` over the box `[lower, upper]` starting from `x0`.
/// `f` returns the value and gradient. The result is never worse than the
/// start.
pub fn minimize<F>(mut f: F, x0: &[f64], lower: &[f64], upper: &[f64], opts: &LbfgsbOptions) -> Result<LbfgsbResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    if lower.len() != n || upper.len() != n {
        return Err(Error::Dimension("bounds vs start".into()));
    }
    if (0..n).any(|i| !(lower[i] <= upper[i])) {
        return Err(Error::InvalidParameter("lower bound above upper bound".into()));
    }
    let mut x = clip(x0.to_vec(), lower, upper);
    let mut ev = Evaluator { f: &mut f, count: 0 };
    let (mut fx, mut g) = ev.eval(&x);
    if !fx.is_finite() {
        return Err(Error::NonFinite("objective at the starting point".into()));
    }
    let mut mem = Memory { s: Vec::new(), y: Vec::new(), cap: opts.memory.max(1) };
    let eps = f64::EPSILON;
    let mut iterations = 0;
    let mut termination = Termination::IterationLimit;
    let mut failures = 0;

    while iterations < opts.max_iterations {
        if projected_gradient_norm(&x, &g, lower, upper) <= opts.pgtol {
            termination = Termination::ProjectedGradient;
            break;
        }
        let b = mem.matrix(n);
        let xc = cauchy_point(&x, &g, &b, lower, upper);
        let xbar = subspace_minimum(&x, &g, &b, &xc, lower, upper);
        let d: Vec<f64> = xbar.iter().zip(&x).map(|(a, c)| a - c).collect();
        let mut dphi0 = dot(&g, &d);
        let (d, alpha_init, alpha_max) = if dphi0 < 0.0 {
            let norm = dot(&d, &d).sqrt();
            let init = if mem.s.is_empty() { (1.0 / norm).min(1.0) } else { 1.0 };
            (d, init, 1.0)
        } else {
            // model direction unusable: projected steepest descent
            mem.clear();
            let pg: Vec<f64> = (0..n).map(|i| (x[i] - g[i]).clamp(lower[i], upper[i]) - x[i]).collect();
            dphi0 = dot(&g, &pg);
            if !(dphi0 < 0.0) {
                termination = Termination::ProjectedGradient;
                break;
            }
            let norm = dot(&pg, &pg).sqrt();
            (pg, (1.0 / norm).min(1.0), 1.0)
        };
        let ray = Ray { x: &x, d: &d, f0: fx, dphi0, lower, upper };
        let found = line_search(&mut ev, &ray, alpha_init, alpha_max);
        let Some(p) = found else {
            failures += 1;
            if failures >= 2 || mem.s.is_empty() {
                termination = Termination::LineSearchFailure;
                break;
            }
            mem.clear();
            continue;
        };
        failures = 0;
        iterations += 1;
        let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, c)| a - c).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, c)| a - c).collect();
        let sy = dot(&s, &y);
        if sy > eps * dot(&y, &y) {
            mem.push(s, y);
        }
        let f_old = fx;
        x = p.x;
        fx = p.f;
        g = p.g;
        if (f_old - fx) <= opts.factr * eps * f_old.abs().max(fx.abs()).max(1.0) {
            termination = Termination::RelativeReduction;
            break;
        }
    }
    Ok(LbfgsbResult { x, f: fx, gradient: g, iterations, evaluations: ev.count, termination })
}
