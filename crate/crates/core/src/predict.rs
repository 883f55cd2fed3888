//! Predictive distributions and conditional simulation at new locations.
//!
//! The observed `Z` and the targets `Y*` share one Vecchia plan in which
//! every observed point precedes every target, so the conditional of `Y*`
//! given `Z` only needs the target rows of the factor: with residuals
//! `r = Z - Xω`, each target in turn is `Σ b_j w_{p_j} + √d e`, where `w` is
//! `r` on observed parents and the already generated value on target
//! parents. Setting `e = 0` gives the conditional mean.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cov::{CovarianceModel, DENSE_CAP};
use crate::error::{GeoWarpError, Result};
use crate::infer::{MapFit, McmcFit};
use crate::params::{MeanCoefficients, ParameterVector};
use crate::posterior::PosteriorContext;
use crate::site::Coordinate;
use crate::vecchia::{build_joint_plan, solve_row, FactorRow, PredictionLayout};

/// Largest number of targets whose marginal variances are computed exactly.
pub const VARIANCE_CAP: usize = 20_000;
const CHUNKS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    /// The noise-free process `Y*`.
    Process,
    /// Measurements `Z* = Y* + ε*`.
    Measurement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSettings {
    pub m: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub layout: PredictionLayout,
}

impl Default for PredictSettings {
    fn default() -> Self {
        Self { m: 100, seed: 0, n_samples: 0, layout: PredictionLayout::Columnar }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub coords: Vec<Coordinate>,
    pub mean: Vec<f64>,
    pub marginal_sd: Vec<f64>,
    /// Joint draws, one row per draw.
    pub samples: Option<Vec<Vec<f64>>>,
    pub kind: PredictionKind,
}

/// Target rows of the joint factor at one `(θ, ω)`.
struct Conditional {
    n_data: usize,
    n_pred: usize,
    rows: Vec<FactorRow>,
    residual: Vec<f64>,
    prior_mean: Vec<f64>,
    sigma_eps_sq: f64,
}

impl Conditional {
    fn new(
        ctx: &PosteriorContext,
        theta: &ParameterVector,
        omega: &MeanCoefficients,
        coords: &[Coordinate],
        s: &PredictSettings,
    ) -> Result<Self> {
        let model = ctx.model();
        model.validate(theta)?;
        crate::error::check_len(model.k_beta(), omega.beta.len())?;
        if coords.is_empty() {
            return Err(GeoWarpError::Data("no prediction coordinates".into()));
        }
        for c in coords {
            if c.dim() != model.dim() {
                return Err(GeoWarpError::Dimension { expected: model.dim(), got: c.dim() });
            }
            model.domain().check(c)?;
        }
        let ds = ctx.dataset();
        let n_data = ds.n_points();
        let plan = build_joint_plan(ds, coords, s.m, s.seed, s.layout)?;
        let mut points = ds.u_points();
        points.extend(coords.iter().map(Coordinate::to_u));
        let pp = CovarianceModel::new(model, theta)?.prepare(&points)?;
        let nugget = theta.sigma_eps_sq;
        let cov = |i: usize, j: usize| pp.covariance(i, j) + if i == j && i < n_data { nugget } else { 0.0 };
        let order = &plan.ordering[n_data..];
        debug_assert!(order.iter().all(|&i| i >= n_data));
        let rows = order
            .par_iter()
            .map(|&i| {
                let (_, weights, cond_var) = solve_row(i, &plan.parents[i], &cov)?;
                Ok(FactorRow { index: i, parents: plan.parents[i].clone(), weights, cond_var })
            })
            .collect::<Result<Vec<_>>>()?;
        let z = ds.values();
        let residual = ds
            .depths()
            .iter()
            .zip(&z)
            .map(|(&h, &v)| Ok(v - model.mean_at(omega, h)?))
            .collect::<Result<Vec<_>>>()?;
        let prior_mean = coords.iter().map(|c| model.mean_at(omega, c.h)).collect::<Result<Vec<_>>>()?;
        Ok(Self { n_data, n_pred: coords.len(), rows, residual, prior_mean, sigma_eps_sq: nugget })
    }

    /// Runs the recursion with innovations `e` (indexed by target), or the
    /// mean when `e` is `None`. Returns `Y*` by target.
    fn propagate(&self, e: Option<&[f64]>) -> Vec<f64> {
        let mut w = self.residual.clone();
        w.resize(self.n_data + self.n_pred, 0.0);
        for r in &self.rows {
            let mut v: f64 = r.parents.iter().zip(&r.weights).map(|(&p, b)| b * w[p]).sum();
            if let Some(e) = e {
                v += r.cond_var.sqrt() * e[r.index - self.n_data];
            }
            w[r.index] = v;
        }
        w[self.n_data..].iter().zip(&self.prior_mean).map(|(d, m)| d + m).collect()
    }

    /// Exact marginal variances of `Y* | Z` under the approximation, and
    /// covariances of the listed target pairs: sums over the columns of
    /// `B_**⁻¹ D^{1/2}`.
    fn second_moments(&self, pairs: &[(usize, usize)]) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.n_pred > VARIANCE_CAP {
            return Err(GeoWarpError::Size(format!(
                "{} targets exceed the limit of {VARIANCE_CAP} for exact variances; request samples instead",
                self.n_pred
            )));
        }
        let n = self.n_pred;
        let nd = self.n_data;
        let rows = &self.rows;
        let bounds: Vec<(usize, usize)> =
            (0..CHUNKS).map(|c| (c * n / CHUNKS, (c + 1) * n / CHUNKS)).filter(|(a, b)| b > a).collect();
        let parts: Vec<(Vec<f64>, Vec<f64>)> = bounds
            .into_par_iter()
            .map(|(lo, hi)| {
                let mut var = vec![0.0; n];
                let mut cov = vec![0.0; pairs.len()];
                let mut col = vec![0.0; n];
                for t in lo..hi {
                    col.iter_mut().for_each(|v| *v = 0.0);
                    let start = rows[t].index - nd;
                    col[start] = rows[t].cond_var.sqrt();
                    for r in &rows[t + 1..] {
                        col[r.index - nd] = r
                            .parents
                            .iter()
                            .zip(&r.weights)
                            .filter(|(&p, _)| p >= nd)
                            .map(|(&p, b)| b * col[p - nd])
                            .sum();
                    }
                    for (v, c) in var.iter_mut().zip(&col) {
                        *v += c * c;
                    }
                    for (k, &(a, b)) in pairs.iter().enumerate() {
                        cov[k] += col[a] * col[b];
                    }
                }
                (var, cov)
            })
            .collect();
        let mut var = vec![0.0; n];
        let mut cov = vec![0.0; pairs.len()];
        for (pv, pc) in &parts {
            for (a, b) in var.iter_mut().zip(pv) {
                *a += b;
            }
            for (a, b) in cov.iter_mut().zip(pc) {
                *a += b;
            }
        }
        Ok((var, cov))
    }

    /// Dense conditional covariance `B_**⁻¹ D B_**⁻ᵀ` by target.
    fn covariance(&self) -> Result<DMatrix<f64>> {
        let n = self.n_pred;
        if n > DENSE_CAP {
            return Err(GeoWarpError::Size(format!("{n} targets exceed the dense limit of {DENSE_CAP}")));
        }
        let nd = self.n_data;
        let mut l = DMatrix::zeros(n, n);
        for (t, row) in self.rows.iter().enumerate() {
            let mut col = vec![0.0; n];
            col[row.index - nd] = row.cond_var.sqrt();
            for r in &self.rows[t + 1..] {
                col[r.index - nd] = r
                    .parents
                    .iter()
                    .zip(&r.weights)
                    .filter(|(&p, _)| p >= nd)
                    .map(|(&p, b)| b * col[p - nd])
                    .sum();
            }
            for (i, v) in col.into_iter().enumerate() {
                l[(i, t)] = v;
            }
        }
        Ok(&l * l.transpose())
    }

    fn draw(&self, seed: u64, index: usize, noise: bool) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let e: Vec<f64> = (0..self.n_pred).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut y = self.propagate(Some(&e));
        if noise {
            let sd = self.sigma_eps_sq.sqrt();
            for v in &mut y {
                let x: f64 = StandardNormal.sample(&mut rng);
                *v += sd * x;
            }
        }
        y
    }
}

/// Sample standard deviation of each column.
fn sample_sd(samples: &[Vec<f64>]) -> Vec<f64> {
    let n = samples.len() as f64;
    let k = samples[0].len();
    (0..k)
        .map(|j| {
            let mean = samples.iter().map(|s| s[j]).sum::<f64>() / n;
            (samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect()
}

/// Predictive distribution of `kind` at `coords`.
pub fn predict_kind(
    ctx: &PosteriorContext,
    theta: &ParameterVector,
    omega: &MeanCoefficients,
    coords: &[Coordinate],
    s: &PredictSettings,
    kind: PredictionKind,
) -> Result<PredictionResult> {
    let cond = Conditional::new(ctx, theta, omega, coords, s)?;
    let noise = kind == PredictionKind::Measurement;
    let mean = cond.propagate(None);
    let samples = if s.n_samples > 0 {
        Some((0..s.n_samples).into_par_iter().map(|i| cond.draw(s.seed, i, noise)).collect::<Vec<_>>())
    } else {
        None
    };
    let marginal_sd = match &samples {
        Some(draws) if draws.len() >= 2 => sample_sd(draws),
        _ => {
            let extra = if noise { cond.sigma_eps_sq } else { 0.0 };
            cond.second_moments(&[])?.0.iter().map(|v| (v + extra).sqrt()).collect()
        }
    };
    Ok(PredictionResult { coords: coords.to_vec(), mean, marginal_sd, samples, kind })
}

/// Predictive distribution of the process `Y*` at `coords`.
pub fn predict(
    ctx: &PosteriorContext,
    theta: &ParameterVector,
    omega: &MeanCoefficients,
    coords: &[Coordinate],
    settings: &PredictSettings,
) -> Result<PredictionResult> {
    predict_kind(ctx, theta, omega, coords, settings, PredictionKind::Process)
}

/// Predictive distribution of new measurements `Z*` at `coords`.
pub fn predict_measurements(
    ctx: &PosteriorContext,
    theta: &ParameterVector,
    omega: &MeanCoefficients,
    coords: &[Coordinate],
    settings: &PredictSettings,
) -> Result<PredictionResult> {
    predict_kind(ctx, theta, omega, coords, settings, PredictionKind::Measurement)
}

/// Measurement predictive distribution plus the predictive covariance of
/// each listed pair of targets, for bivariate scoring.
pub fn predict_measurements_with_pairs(
    ctx: &PosteriorContext,
    theta: &ParameterVector,
    omega: &MeanCoefficients,
    coords: &[Coordinate],
    settings: &PredictSettings,
    pairs: &[(usize, usize)],
) -> Result<(PredictionResult, Vec<f64>)> {
    if pairs.iter().any(|&(a, b)| a >= coords.len() || b >= coords.len()) {
        return Err(GeoWarpError::Data("pair index out of range".into()));
    }
    let cond = Conditional::new(ctx, theta, omega, coords, settings)?;
    let (var, cov) = cond.second_moments(pairs)?;
    let nugget = cond.sigma_eps_sq;
    let cov = pairs.iter().zip(cov).map(|(&(a, b), c)| if a == b { c + nugget } else { c }).collect();
    let result = PredictionResult {
        coords: coords.to_vec(),
        mean: cond.propagate(None),
        marginal_sd: var.iter().map(|v| (v + nugget).sqrt()).collect(),
        samples: None,
        kind: PredictionKind::Measurement,
    };
    Ok((result, cov))
}

/// Conditional covariance of `Y*` given `Z` as a dense matrix.
pub fn conditional_covariance(
    ctx: &PosteriorContext,
    theta: &ParameterVector,
    omega: &MeanCoefficients,
    coords: &[Coordinate],
    settings: &PredictSettings,
) -> Result<DMatrix<f64>> {
    Conditional::new(ctx, theta, omega, coords, settings)?.covariance()
}

/// Regular grid of `(easting, northing, depth)` with inclusive end points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    /// `(min, max, count)` per horizontal axis.
    pub horizontal: Vec<(f64, f64, usize)>,
    pub depth: (f64, f64, usize),
}

fn axis_values((lo, hi, n): (f64, f64, usize)) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl Grid {
    /// Parses `x0,x1,nx,[y0,y1,ny,]z0,z1,nz`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 6 && parts.len() != 9 {
            return Err(GeoWarpError::config(format!("grid needs 6 or 9 comma-separated values, got {}", parts.len())));
        }
        let axis = |k: usize| -> Result<(f64, f64, usize)> {
            let f = |s: &str| s.parse::<f64>().map_err(|_| GeoWarpError::config(format!("invalid grid value '{s}'")));
            let n = parts[k + 2]
                .parse::<usize>()
                .map_err(|_| GeoWarpError::config(format!("invalid grid count '{}'", parts[k + 2])))?;
            let (lo, hi) = (f(parts[k])?, f(parts[k + 1])?);
            if n == 0 || hi < lo {
                return Err(GeoWarpError::config(format!("invalid grid axis {lo},{hi},{n}")));
            }
            Ok((lo, hi, n))
        };
        let n_axes = parts.len() / 3;
        let horizontal = (0..n_axes - 1).map(|a| axis(3 * a)).collect::<Result<_>>()?;
        Ok(Self { horizontal, depth: axis(3 * (n_axes - 1))? })
    }

    /// Grid points, column by column with depth varying fastest.
    pub fn coordinates(&self) -> Vec<Coordinate> {
        let depths = axis_values(self.depth);
        let mut locations: Vec<Vec<f64>> = vec![Vec::new()];
        for &ax in &self.horizontal {
            let vals = axis_values(ax);
            locations = locations
                .iter()
                .flat_map(|l| {
                    vals.iter().map(move |v| {
                        let mut l = l.clone();
                        l.push(*v);
                        l
                    })
                })
                .collect();
        }
        locations.iter().flat_map(|l| depths.iter().map(move |&h| Coordinate::new(l, h))).collect()
    }
}

/// Source of parameter values for posterior simulation.
#[derive(Clone, Copy, Debug)]
pub enum FitDraws<'a> {
    /// `n_draws` fields at `(θ̂, ω̂)`.
    Map { fit: &'a MapFit, n_draws: usize },
    /// One field per retained MCMC draw.
    Mcmc(&'a McmcFit),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedFields {
    pub coords: Vec<Coordinate>,
    pub kind: PredictionKind,
    /// One row per draw.
    pub draws: Vec<Vec<f64>>,
}

/// Posterior predictive fields at `coords`. Each draw has its own random
/// stream, so the result does not depend on the thread count.
pub fn simulate_posterior(
    ctx: &PosteriorContext,
    source: FitDraws<'_>,
    coords: &[Coordinate],
    settings: &PredictSettings,
    kind: PredictionKind,
) -> Result<SimulatedFields> {
    let noise = kind == PredictionKind::Measurement;
    let draws = match source {
        FitDraws::Map { fit, n_draws } => {
            let cond = Conditional::new(ctx, &fit.theta, &fit.omega, coords, settings)?;
            (0..n_draws).into_par_iter().map(|i| cond.draw(settings.seed, i, noise)).collect()
        }
        FitDraws::Mcmc(fit) => fit
            .draws
            .par_iter()
            .enumerate()
            .map(|(i, d)| {
                let cond = Conditional::new(ctx, &d.theta, &d.omega, coords, settings)?;
                Ok(cond.draw(settings.seed, i, noise))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(SimulatedFields { coords: coords.to_vec(), kind, draws })
}
