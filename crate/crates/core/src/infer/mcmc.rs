//! Adaptive random-walk Metropolis in the unconstrained chart.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::map::random_theta;
use crate::error::{GeoWarpError, Result};
use crate::params::{MeanCoefficients, ParameterVector};
use crate::posterior::PosteriorContext;

/// Unnormalized log-density on `R^d`; `-∞` marks zero density.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSettings {
    pub n_chains: usize,
    pub n_iterations: usize,
    pub n_burnin: usize,
    pub seed: u64,
    /// Keep every `thin`-th post-burn-in state.
    pub thin: usize,
    /// Standard deviation of the initial isotropic proposal.
    pub initial_scale: f64,
    /// Adapt the proposal covariance during burn-in.
    pub adapt: bool,
}

impl Default for McmcSettings {
    fn default() -> Self {
        Self { n_chains: 4, n_iterations: 20_000, n_burnin: 10_000, seed: 0, thin: 10, initial_scale: 0.05, adapt: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub samples: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    /// Acceptance rate after burn-in.
    pub acceptance_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcOutput {
    pub chains: Vec<Chain>,
    /// Split-R̂ per coordinate.
    pub rhat: Vec<f64>,
    pub warnings: Vec<String>,
}

fn check_settings(s: &McmcSettings) -> Result<()> {
    if s.n_iterations <= s.n_burnin {
        return Err(GeoWarpError::config("MCMC iterations must exceed the burn-in"));
    }
    if s.n_chains == 0 || s.thin == 0 {
        return Err(GeoWarpError::config("MCMC needs at least one chain and a positive thinning"));
    }
    Ok(())
}

/// Running mean and covariance (Welford).
struct Moments {
    n: f64,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self { n: 0.0, mean: DVector::zeros(d), m2: DMatrix::zeros(d, d) }
    }

    fn push(&mut self, x: &[f64]) {
        let x = DVector::from_column_slice(x);
        self.n += 1.0;
        let delta = &x - &self.mean;
        self.mean += &delta / self.n;
        let delta2 = &x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn covariance(&self) -> DMatrix<f64> {
        &self.m2 / (self.n - 1.0)
    }
}

fn run_chain<T: LogDensity>(target: &T, init: &[f64], s: &McmcSettings, index: usize) -> Chain {
    let d = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(index as u64);
    let mut x = init.to_vec();
    let mut lp = target.log_density(&x);
    let mut chol = DMatrix::<f64>::identity(d, d) * s.initial_scale;
    let scale = 2.38 * 2.38 / d as f64;
    let mut moments = Moments::new(d);
    let mut samples = Vec::new();
    let mut log_density = Vec::new();
    let mut accepted = 0usize;
    for it in 0..s.n_iterations {
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let step = &chol * z;
        let proposal: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let u: f64 = rng.gen();
        // An unchanged proposal counts as a rejection.
        if proposal != x {
            let lq = target.log_density(&proposal);
            if lq.is_finite() && u.ln() < lq - lp {
                x = proposal;
                lp = lq;
                if it >= s.n_burnin {
                    accepted += 1;
                }
            }
        }
        if it < s.n_burnin {
            if s.adapt {
                moments.push(&x);
                if moments.n >= (2 * d).max(10) as f64 {
                    let mut c = moments.covariance() * scale;
                    let eps = 1e-10 * (1.0 + c.diagonal().amax());
                    for k in 0..d {
                        c[(k, k)] += eps;
                    }
                    if let Some(ch) = c.cholesky() {
                        chol = ch.l();
                    }
                }
            }
        } else if (it - s.n_burnin) % s.thin == 0 {
            samples.push(x.clone());
            log_density.push(lp);
        }
    }
    let kept = s.n_iterations - s.n_burnin;
    Chain { samples, log_density, acceptance_rate: accepted as f64 / kept as f64 }
}

/// Split-R̂ for each coordinate over chains of equal length.
pub fn split_rhat(chains: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let Some(first) = chains.first() else { return Vec::new() };
    let d = first.first().map_or(0, |s| s.len());
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    if n < 2 {
        return vec![f64::NAN; d];
    }
    (0..d)
        .map(|k| {
            let halves: Vec<Vec<f64>> = chains
                .iter()
                .flat_map(|c| [c[..n].iter().map(|s| s[k]).collect(), c[n..2 * n].iter().map(|s| s[k]).collect()])
                .collect();
            let m = halves.len() as f64;
            let nf = n as f64;
            let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / nf).collect();
            let grand = means.iter().sum::<f64>() / m;
            let b = nf / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
            let w = halves
                .iter()
                .zip(&means)
                .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
                .sum::<f64>()
                / m;
            if w == 0.0 {
                return if b == 0.0 { 1.0 } else { f64::INFINITY };
            }
            (((nf - 1.0) / nf * w + b / nf) / w).sqrt()
        })
        .collect()
}

/// Runs independent adaptive Metropolis chains from the given starts.
pub fn run_adaptive_metropolis<T: LogDensity>(target: &T, inits: &[Vec<f64>], s: &McmcSettings) -> Result<McmcOutput> {
    check_settings(s)?;
    if inits.len() != s.n_chains {
        return Err(GeoWarpError::config(format!("{} chains need {} starting points", s.n_chains, inits.len())));
    }
    for init in inits {
        crate::error::check_len(target.dim(), init.len())?;
        if !target.log_density(init).is_finite() {
            return Err(GeoWarpError::Inference("MCMC start has zero posterior density".into()));
        }
    }
    let chains: Vec<Chain> = inits.par_iter().enumerate().map(|(i, x0)| run_chain(target, x0, s, i)).collect();
    let mut warnings = Vec::new();
    for (i, c) in chains.iter().enumerate() {
        if c.acceptance_rate < 0.01 {
            let msg = format!("chain {i} accepted {:.2}% of proposals after burn-in", 100.0 * c.acceptance_rate);
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let samples: Vec<Vec<Vec<f64>>> = chains.iter().map(|c| c.samples.clone()).collect();
    let rhat = split_rhat(&samples);
    Ok(McmcOutput { chains, rhat, warnings })
}

struct ChartTarget<'a> {
    ctx: &'a PosteriorContext,
}

impl LogDensity for ChartTarget<'_> {
    fn dim(&self) -> usize {
        self.ctx.model().chart_dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.ctx.chart_value(x, true).unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraw {
    pub chain: usize,
    pub chart: Vec<f64>,
    pub theta: ParameterVector,
    pub omega: MeanCoefficients,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcFit {
    pub draws: Vec<PosteriorDraw>,
    pub acceptance_rates: Vec<f64>,
    pub rhat: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Samples the posterior of `θ` and, for every retained draw, one `ω` from
/// its full conditional. Chains start from random points unless `center`
/// is given, in which case they start from small perturbations of it.
pub fn fit_mcmc(ctx: &PosteriorContext, s: &McmcSettings, center: Option<&[f64]>) -> Result<McmcFit> {
    check_settings(s)?;
    let model = ctx.model();
    let inits: Vec<Vec<f64>> = (0..s.n_chains)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x9e37_79b9_7f4a_7c15);
            rng.set_stream(i as u64);
            match center {
                Some(c) => Ok(c.iter().map(|v| v + 0.01 * rng.sample::<f64, _>(StandardNormal)).collect()),
                None => model.encode(&random_theta(model, ctx.dataset(), &mut rng)),
            }
        })
        .collect::<Result<_>>()?;
    let out = run_adaptive_metropolis(&ChartTarget { ctx }, &inits, s)?;
    let draws: Vec<PosteriorDraw> = out
        .chains
        .par_iter()
        .enumerate()
        .map(|(ci, chain)| {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x5851_f42d_4c95_7f2d);
            rng.set_stream(ci as u64);
            chain
                .samples
                .iter()
                .map(|x| {
                    let (theta, _) = model.decode(x)?;
                    let omega = ctx.mean_coefficients_full_conditional(&theta)?.sample(&mut rng);
                    Ok(PosteriorDraw { chain: ci, chart: x.clone(), theta, omega })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(McmcFit {
        draws,
        acceptance_rates: out.chains.iter().map(|c| c.acceptance_rate).collect(),
        rhat: out.rhat,
        warnings: out.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Gaussian {
        mean: Vec<f64>,
        prec: DMatrix<f64>,
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.mean.len()
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            let r = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, b)| a - b));
            -0.5 * r.dot(&(&self.prec * &r))
        }
    }

    #[test]
    fn standard_gaussian_moments() {
        let target = Gaussian { mean: vec![0.0; 5], prec: DMatrix::identity(5, 5) };
        let s = McmcSettings { n_chains: 1, n_iterations: 60_000, n_burnin: 10_000, thin: 1, seed: 3, initial_scale: 0.5, adapt: true };
        let out = run_adaptive_metropolis(&target, &[vec![0.5; 5]], &s).unwrap();
        let samples = &out.chains[0].samples;
        assert_eq!(samples.len(), 50_000);
        let mut m = Moments::new(5);
        for x in samples {
            m.push(x);
        }
        assert!(m.mean.amax() < 0.05, "{}", m.mean);
        let rel = (m.covariance() - DMatrix::<f64>::identity(5, 5)).norm() / 5f64.sqrt();
        assert!(rel < 0.1, "{rel}");
    }

    #[test]
    fn zero_variance_proposal_never_moves() {
        let target = Gaussian { mean: vec![0.0; 2], prec: DMatrix::identity(2, 2) };
        let s = McmcSettings { n_chains: 1, n_iterations: 200, n_burnin: 100, thin: 1, seed: 0, initial_scale: 0.0, adapt: false };
        let out = run_adaptive_metropolis(&target, &[vec![0.3, -0.2]], &s).unwrap();
        assert!(out.chains[0].samples.iter().all(|x| x == &vec![0.3, -0.2]));
        assert_eq!(out.chains[0].acceptance_rate, 0.0);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn chains_agree() {
        let target = Gaussian { mean: vec![1.0, -2.0, 0.5], prec: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 0.25])) };
        let s = McmcSettings { n_chains: 4, n_iterations: 20_000, n_burnin: 5_000, thin: 5, seed: 1, ..McmcSettings::default() };
        let inits = vec![vec![3.0, 0.0, 0.0], vec![-1.0, -3.0, 2.0], vec![0.0, 0.0, -2.0], vec![2.0, -2.0, 1.0]];
        let out = run_adaptive_metropolis(&target, &inits, &s).unwrap();
        assert!(out.rhat.iter().all(|r| *r < 1.1), "{:?}", out.rhat);
        let again = run_adaptive_metropolis(&target, &inits, &s).unwrap();
        assert_eq!(out, again);
    }

    /// Detailed balance on a discretized 1-D target: the empirical
    /// distribution over bins passes a χ² test against the exact bin masses.
    #[test]
    fn one_dimensional_stationary_distribution() {
        struct Laplace;
        impl LogDensity for Laplace {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, x: &[f64]) -> f64 {
                -x[0].abs()
            }
        }
        let s = McmcSettings { n_chains: 1, n_iterations: 410_000, n_burnin: 10_000, thin: 20, seed: 5, initial_scale: 2.0, adapt: false };
        let out = run_adaptive_metropolis(&Laplace, &[vec![0.0]], &s).unwrap();
        let xs: Vec<f64> = out.chains[0].samples.iter().map(|v| v[0]).collect();
        let edges = [-f64::INFINITY, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, f64::INFINITY];
        let cdf = |x: f64| if x < 0.0 { 0.5 * x.exp() } else { 1.0 - 0.5 * (-x).exp() };
        let n = xs.len() as f64;
        let mut chi2 = 0.0;
        for w in edges.windows(2) {
            let expected = n * (cdf(w[1]) - cdf(w[0]));
            let observed = xs.iter().filter(|x| **x >= w[0] && **x < w[1]).count() as f64;
            chi2 += (observed - expected).powi(2) / expected;
        }
        // 99th percentile of χ² with 7 degrees of freedom.
        assert!(chi2 < 18.475, "{chi2}");
    }

    #[test]
    fn rhat_flags_disagreement() {
        let a: Vec<Vec<f64>> = (0..100).map(|i| vec![(i as f64).sin()]).collect();
        let b: Vec<Vec<f64>> = (0..100).map(|i| vec![5.0 + (i as f64).cos()]).collect();
        assert!(split_rhat(&[a.clone(), b])[0] > 1.5);
        assert!(split_rhat(&[a.clone(), a])[0] < 1.1);
    }
}
