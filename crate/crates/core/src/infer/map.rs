//! Multi-start MAP estimation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, InverseGamma, Normal};

use super::lbfgs::{minimize, OptimResult, OptimizerSettings, StopReason};
use crate::config::WarpMode;
use crate::error::{check_len, GeoWarpError, Result};
use crate::model::Model;
use crate::params::{factor_to_cpc, MeanCoefficients, ParameterVector};
use crate::posterior::PosteriorContext;
use crate::prior::SplineCoefficientPrior;
use crate::site::SiteDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapSettings {
    pub n_starts: usize,
    pub seed: u64,
    /// Use the deterministic data-informed point as the first start.
    pub data_informed_start: bool,
    /// Chart point for the first start, overriding `data_informed_start`;
    /// e.g. a fit at another parent count.
    pub warm_start: Option<Vec<f64>>,
    pub optimizer: OptimizerSettings,
}

impl Default for MapSettings {
    fn default() -> Self {
        Self { n_starts: 10, seed: 0, data_informed_start: true, warm_start: None, optimizer: OptimizerSettings::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartDiagnostics {
    pub index: usize,
    pub initial: Vec<f64>,
    pub log_posterior: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub grad_norm: f64,
    pub reason: StopReason,
    pub converged: bool,
    /// Log posterior after every accepted iteration.
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapFit {
    pub theta: ParameterVector,
    /// `θ̂` in the unconstrained chart.
    pub chart: Vec<f64>,
    pub omega: MeanCoefficients,
    pub log_posterior: f64,
    pub selected_start: usize,
    pub starts: Vec<StartDiagnostics>,
}

/// Variance of the residuals from a least-squares line in depth.
fn linear_residual_variance(ds: &SiteDataset) -> f64 {
    let h = ds.depths();
    let z = ds.values();
    let n = h.len() as f64;
    let (mh, mz) = (h.iter().sum::<f64>() / n, z.iter().sum::<f64>() / n);
    let shh: f64 = h.iter().map(|x| (x - mh).powi(2)).sum();
    let shz: f64 = h.iter().zip(&z).map(|(x, y)| (x - mh) * (y - mz)).sum();
    let slope = if shh > 0.0 { shz / shh } else { 0.0 };
    let rss: f64 = h.iter().zip(&z).map(|(x, y)| (y - mz - slope * (x - mh)).powi(2)).sum();
    (rss / n).max(1e-6)
}

/// Deterministic starting point: identity warping, no depth trend in the
/// variance, and scales matched to the data.
pub fn data_informed_theta(model: &Model, ds: &SiteDataset) -> ParameterVector {
    let v = linear_residual_variance(ds);
    let mut theta = model.default_theta();
    theta.kappa[0] = (0.8 * v).ln();
    theta.sigma_eps_sq = 0.2 * v;
    theta.sigma_beta_sq = 1e-3;
    theta.ell_zeta = 1.0;
    theta.sigma_zeta_sq = 0.1;
    theta
}

fn truncated_uniform<R: Rng>(rng: &mut R) -> f64 {
    rng.gen_range(0.01..0.99)
}

/// Random starting point. Bounded and correlation blocks and the nugget
/// come from their priors truncated at the 1st and 99th percentiles; the
/// weakly informative scale blocks are jittered around the data-informed
/// point.
pub fn random_theta<R: Rng>(model: &Model, ds: &SiteDataset, rng: &mut R) -> ParameterVector {
    let h = &model.cfg().hyper;
    let d = model.dim();
    let mut theta = data_informed_theta(model, ds);
    let mode = model.variant().warp_mode();
    let tied = model.cfg().tie_horizontal_awus && d == 2;
    let jitter = |rng: &mut R, v: f64| v * rng.gen_range(-1.0..1.0f64).exp();

    theta.kappa[0] += rng.gen_range(-1.0..1.0);
    theta.sigma_beta_sq = jitter(rng, theta.sigma_beta_sq);
    if model.variant().varying_variance() {
        let half_normal = Normal::new(0.0, h.sigma_ell_sq.sqrt()).unwrap();
        theta.ell_zeta = half_normal.inverse_cdf(0.5 + 0.5 * truncated_uniform(rng)).max(1e-3);
        theta.sigma_zeta_sq = jitter(rng, theta.sigma_zeta_sq);
        let k = model.k_zeta();
        let c = SplineCoefficientPrior::ExponentialDecay { length: theta.ell_zeta }.correlation_matrix(k);
        let l = c.cholesky().map(|ch| ch.l()).unwrap_or_else(|| nalgebra::DMatrix::identity(k, k));
        let e = nalgebra::DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(rng)));
        let zeta = l * e * theta.sigma_zeta_sq.sqrt();
        theta.kappa[1..].copy_from_slice(zeta.as_slice());
    }
    for axis in 0..d {
        if mode == WarpMode::Full || mode == WarpMode::Linear {
            let (lo, hi) = model.gamma_bounds(axis);
            let draw = |rng: &mut R| 1.0 / (1.0 / hi + truncated_uniform(rng) * (1.0 / lo - 1.0 / hi));
            let n = theta.gamma[axis].len();
            if mode == WarpMode::Full {
                for j in 0..n {
                    theta.gamma[axis][j] = draw(rng);
                }
            } else {
                theta.gamma[axis] = vec![draw(rng); n];
            }
        }
    }
    if tied {
        theta.gamma[1] = theta.gamma[0].clone();
    }
    if mode != WarpMode::None {
        let n = theta.gamma[d].len();
        if mode == WarpMode::Linear {
            let v = jitter(rng, theta.gamma[d][0]);
            theta.gamma[d] = vec![v; n];
        } else {
            for j in 0..n {
                theta.gamma[d][j] = jitter(rng, theta.gamma[d][j]);
            }
        }
    }
    if mode == WarpMode::Full {
        // Vine construction of the LKJ prior on partial correlations.
        let k = d + 1;
        let mut y = Vec::new();
        for i in 1..k {
            for j in 0..i {
                let b = h.rho_r + (k as f64 - 2.0 - j as f64) / 2.0;
                let z = 2.0 * Beta::new(b, b).unwrap().inverse_cdf(truncated_uniform(rng)) - 1.0;
                y.push(z.atanh());
            }
        }
        theta.r = crate::params::cpc_to_factor(&y, k).0;
    }
    let ig = InverseGamma::new(h.a_eps, h.b_eps).unwrap();
    theta.sigma_eps_sq = ig.inverse_cdf(truncated_uniform(rng));
    debug_assert_eq!(factor_to_cpc(&theta.r).len(), (d + 1) * d / 2);
    theta
}

/// The optimizer works on `ζ / σ_ζ` instead of `ζ`. Collapsing `σ_ζ` drags
/// every `ζ_j` along with it, and in the original chart that funnel makes
/// the Hessian hopelessly ill-conditioned. Objective values are unchanged,
/// so the optimum is the same point.
struct ZetaScaling {
    zeta: std::ops::Range<usize>,
    log_var: usize,
}

impl ZetaScaling {
    fn for_model(model: &Model) -> Option<Self> {
        model.variant().varying_variance().then(|| Self {
            zeta: 1..1 + model.k_zeta(),
            log_var: model.chart_dim() - 1,
        })
    }

    fn to_chart(&self, y: &[f64]) -> Vec<f64> {
        let s = (0.5 * y[self.log_var]).exp();
        let mut x = y.to_vec();
        x[self.zeta.clone()].iter_mut().for_each(|v| *v *= s);
        x
    }

    fn from_chart(&self, x: &[f64]) -> Vec<f64> {
        let s = (0.5 * x[self.log_var]).exp();
        let mut y = x.to_vec();
        y[self.zeta.clone()].iter_mut().for_each(|v| *v /= s);
        y
    }

    /// Chart gradient at `x = to_chart(y)` to a gradient in `y`.
    fn pull_gradient(&self, x: &[f64], g: &mut [f64]) {
        let s = (0.5 * x[self.log_var]).exp();
        let mut extra = 0.0;
        for j in self.zeta.clone() {
            extra += 0.5 * g[j] * x[j];
            g[j] *= s;
        }
        g[self.log_var] += extra;
    }
}

fn run_start(ctx: &PosteriorContext, x0: Vec<f64>, settings: &OptimizerSettings) -> OptimResult {
    let scaling = ZetaScaling::for_model(ctx.model());
    let neg = |y: &[f64]| {
        let x = scaling.as_ref().map_or_else(|| y.to_vec(), |s| s.to_chart(y));
        let (v, mut g) = ctx.chart_value_and_gradient(&x, false)?;
        if let Some(s) = &scaling {
            s.pull_gradient(&x, &mut g);
        }
        Ok((-v, g.into_iter().map(|v| -v).collect()))
    };
    let y0 = scaling.as_ref().map_or_else(|| x0.clone(), |s| s.from_chart(&x0));
    let mut r = minimize(neg, &y0, settings);
    if let Some(s) = &scaling {
        r.x = s.to_chart(&r.x);
    }
    r
}

/// Multi-start MAP estimate of `θ`, with `ω̂` the full-conditional mean at
/// `θ̂`.
pub fn fit_map(ctx: &PosteriorContext, settings: &MapSettings) -> Result<MapFit> {
    if settings.n_starts == 0 {
        return Err(GeoWarpError::config("at least one optimizer start is required"));
    }
    let model = ctx.model();
    let inits: Vec<Vec<f64>> = (0..settings.n_starts)
        .map(|i| {
            if let (0, Some(x)) = (i, &settings.warm_start) {
                check_len(model.chart_dim(), x.len())?;
                return Ok(x.clone());
            }
            let theta = if i == 0 && settings.data_informed_start {
                data_informed_theta(model, ctx.dataset())
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
                rng.set_stream(i as u64);
                random_theta(model, ctx.dataset(), &mut rng)
            };
            model.encode(&theta)
        })
        .collect::<Result<_>>()?;
    let results: Vec<OptimResult> =
        inits.par_iter().map(|x0| run_start(ctx, x0.clone(), &settings.optimizer)).collect();
    let starts: Vec<StartDiagnostics> = results
        .iter()
        .zip(&inits)
        .enumerate()
        .map(|(index, (r, x0))| StartDiagnostics {
            index,
            initial: x0.clone(),
            log_posterior: -r.value,
            iterations: r.iterations,
            evaluations: r.evaluations,
            grad_norm: r.grad_norm,
            reason: r.reason,
            converged: r.converged(),
            trace: r.trace.iter().map(|v| -v).collect(),
        })
        .collect();
    let best = (0..results.len())
        .filter(|&i| results[i].value.is_finite())
        .min_by(|&a, &b| results[a].value.total_cmp(&results[b].value).then(a.cmp(&b)));
    let Some(best) = best else {
        return Err(GeoWarpError::Inference(format!(
            "all {} optimizer starts failed: {}",
            starts.len(),
            serde_json::to_string(&starts).unwrap_or_default()
        )));
    };
    if !results[best].converged() {
        log::warn!("selected MAP start {best} stopped without meeting the tolerance ({:?})", results[best].reason);
    }
    let chart = results[best].x.clone();
    let (theta, _) = model.decode(&chart)?;
    let omega = ctx.mean_coefficients_full_conditional(&theta)?.mean_coefficients();
    Ok(MapFit { theta, chart, omega, log_posterior: -results[best].value, selected_start: best, starts })
}
