//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub max_iterations: usize,
    /// Stop once the Euclidean gradient norm falls below this.
    pub grad_tol: f64,
    /// Stop once an iteration improves the objective by less than this
    /// fraction of `max(|f|, 1)`. The default is `1e7` machine epsilons.
    pub rel_tol: f64,
    pub history: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self { max_iterations: 2000, grad_tol: 1e-5, rel_tol: 1e7 * f64::EPSILON, history: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    RelativeTolerance,
    LineSearchFailed,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: StopReason,
    /// Objective value after every accepted iteration.
    pub trace: Vec<f64>,
}

impl OptimResult {
    pub fn converged(&self) -> bool {
        matches!(self.reason, StopReason::GradientTolerance | StopReason::RelativeTolerance)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Evaluation that maps failures and non-finite values to `+∞`.
struct Counted<'a, F> {
    f: &'a F,
    count: usize,
}

impl<F> Counted<'_, F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn eval(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self.count += 1;
        match (self.f)(x) {
            Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => (v, g),
            _ => (f64::INFINITY, vec![0.0; x.len()]),
        }
    }
}

struct LinePoint {
    step: f64,
    value: f64,
    slope: f64,
    grad: Vec<f64>,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

fn along(x: &[f64], d: &[f64], t: f64) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + t * b).collect()
}

/// Strong-Wolfe line search; returns the accepted point or `None`.
fn line_search<F>(obj: &mut Counted<F>, x: &[f64], f0: f64, g0: &[f64], d: &[f64], t0: f64) -> Option<LinePoint>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let slope0 = dot(g0, d);
    if slope0 >= 0.0 {
        return None;
    }
    let probe = |obj: &mut Counted<F>, t: f64| {
        let (v, g) = obj.eval(&along(x, d, t));
        let s = dot(&g, d);
        LinePoint { step: t, value: v, slope: s, grad: g }
    };
    let mut prev = LinePoint { step: 0.0, value: f0, slope: slope0, grad: g0.to_vec() };
    let mut t = t0;
    for i in 0..40 {
        let cur = probe(obj, t);
        if !cur.value.is_finite() {
            // Outside the region where the objective is defined: shrink.
            t = 0.5 * (prev.step + t);
            if t - prev.step < 1e-16 * t.max(1.0) {
                return None;
            }
            continue;
        }
        if cur.value > f0 + C1 * t * slope0 || (i > 0 && cur.value >= prev.value) {
            return zoom(obj, x, d, f0, slope0, prev, cur);
        }
        if cur.slope.abs() <= -C2 * slope0 {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            return zoom(obj, x, d, f0, slope0, cur, prev);
        }
        t *= 2.0;
        prev = cur;
    }
    None
}

fn zoom<F>(
    obj: &mut Counted<F>,
    x: &[f64],
    d: &[f64],
    f0: f64,
    slope0: f64,
    mut lo: LinePoint,
    mut hi: LinePoint,
) -> Option<LinePoint>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    for _ in 0..60 {
        let width = (hi.step - lo.step).abs();
        if width < 1e-14 * lo.step.abs().max(1e-10) {
            break;
        }
        // Cubic interpolation when both ends are finite, else bisection.
        let mut t = 0.5 * (lo.step + hi.step);
        if hi.value.is_finite() {
            let d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (lo.step - hi.step);
            let disc = d1 * d1 - lo.slope * hi.slope;
            if disc >= 0.0 {
                let d2 = disc.sqrt() * (hi.step - lo.step).signum();
                let c = hi.step - (hi.step - lo.step) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
                let (a, b) = (lo.step.min(hi.step), lo.step.max(hi.step));
                if c.is_finite() && c > a + 0.1 * width && c < b - 0.1 * width {
                    t = c;
                }
            }
        }
        let (v, g) = obj.eval(&along(x, d, t));
        let cur = LinePoint { step: t, value: v, slope: dot(&g, d), grad: g };
        if !cur.value.is_finite() || cur.value > f0 + C1 * t * slope0 || cur.value >= lo.value {
            hi = cur;
        } else {
            if cur.slope.abs() <= -C2 * slope0 {
                return Some(cur);
            }
            if cur.slope * (hi.step - lo.step) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    // Accept the best point found if it still decreases sufficiently.
    (lo.step > 0.0 && lo.value <= f0 + C1 * lo.step * slope0).then_some(lo)
}

/// Minimizes `f` from `x0`. `f` returns the value and gradient; failures
/// are treated as points outside the domain.
pub fn minimize<F>(f: F, x0: &[f64], settings: &OptimizerSettings) -> OptimResult
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut obj = Counted { f: &f, count: 0 };
    let mut x = x0.to_vec();
    let (mut value, mut grad) = obj.eval(&x);
    let mut trace = vec![value];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut reason = StopReason::MaxIterations;
    let mut iterations = 0;
    if !value.is_finite() {
        return OptimResult {
            x,
            value,
            grad_norm: f64::INFINITY,
            iterations,
            evaluations: obj.count,
            reason: StopReason::LineSearchFailed,
            trace,
        };
    }
    while iterations < settings.max_iterations {
        let gnorm = norm(&grad);
        if gnorm < settings.grad_tol {
            reason = StopReason::GradientTolerance;
            break;
        }
        // Two-loop recursion.
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = memory.back().map_or(1.0 / gnorm.max(1.0), |(s, y, _)| dot(s, y) / dot(y, y));
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&dir, &grad) >= 0.0 {
            memory.clear();
            dir = grad.iter().map(|v| -v / gnorm.max(1.0)).collect();
        }
        let accepted = match line_search(&mut obj, &x, value, &grad, &dir, 1.0) {
            Some(p) => Some(p),
            None if !memory.is_empty() => {
                // Retry along steepest descent with fresh curvature memory.
                memory.clear();
                dir = grad.iter().map(|v| -v / gnorm.max(1.0)).collect();
                line_search(&mut obj, &x, value, &grad, &dir, 1.0)
            }
            None => None,
        };
        let Some(p) = accepted else {
            reason = StopReason::LineSearchFailed;
            break;
        };
        iterations += 1;
        let new_x = along(&x, &dir, p.step);
        let s: Vec<f64> = new_x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = p.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if memory.len() == settings.history {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        let improvement = value - p.value;
        let scale = value.abs().max(p.value.abs()).max(1.0);
        x = new_x;
        value = p.value;
        grad = p.grad;
        trace.push(value);
        log::debug!("iteration {iterations}: f = {value:.8}, |g| = {:.3e}, step {:.3e}", norm(&grad), p.step);
        if improvement <= settings.rel_tol * scale {
            reason = if norm(&grad) < settings.grad_tol {
                StopReason::GradientTolerance
            } else {
                StopReason::RelativeTolerance
            };
            break;
        }
    }
    OptimResult { grad_norm: norm(&grad), x, value, iterations, evaluations: obj.count, reason, trace }
}
