//! Synthetic sites simulated from known parameters, and the per-sounding
//! Matérn smoothness study.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Variant};
use crate::cov::{CovarianceModel, Matern, DENSE_CAP};
use crate::error::{GeoWarpError, Result};
use crate::infer::{minimize, OptimizerSettings, StopReason};
use crate::model::{Domain, Model};
use crate::params::{cpc_to_factor, MeanCoefficients, ParameterVector};
use crate::site::{depth_bin, Coordinate, SiteDataset, Sounding};
use crate::vecchia::{build_plan, factorize};

/// Largest site [`generate_site`] will simulate.
pub const SIMULATION_CAP: usize = 20_000;
/// Parents per point when the site is too large for a dense simulation.
const SIMULATION_PARENTS: usize = 60;
/// Diagonal jitter, relative to the mean deviation variance.
const SIMULATION_JITTER: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundingLayout {
    pub id: String,
    pub location: Vec<f64>,
    pub depths: Vec<f64>,
}

/// Where a synthetic site is sampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteLayout {
    pub soundings: Vec<SoundingLayout>,
}

/// `start, start + step, ..` up to `end`, rounded to nanometres so that the
/// grid values are reproducible decimals.
pub fn regular_depths(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step + 1e-9).floor() as usize + 1;
    (0..n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect()
}

impl SiteLayout {
    /// Soundings named `prefix01, prefix02, ..` sharing one depth grid.
    pub fn regular(prefix: &str, locations: &[Vec<f64>], depths: &[f64]) -> Self {
        let soundings = locations
            .iter()
            .enumerate()
            .map(|(i, loc)| SoundingLayout {
                id: format!("{prefix}{:02}", i + 1),
                location: loc.clone(),
                depths: depths.to_vec(),
            })
            .collect();
        Self { soundings }
    }

    pub fn n_points(&self) -> usize {
        self.soundings.iter().map(|s| s.depths.len()).sum()
    }

    pub fn coordinates(&self) -> Vec<Coordinate> {
        self.soundings
            .iter()
            .flat_map(|s| s.depths.iter().map(|&h| Coordinate::new(&s.location, h)))
            .collect()
    }

    fn dataset(&self, values: &[f64]) -> Result<SiteDataset> {
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.soundings.len());
        for s in &self.soundings {
            let n = s.depths.len();
            out.push(Sounding::new(
                s.id.clone(),
                s.location.clone(),
                s.depths.clone(),
                values[offset..offset + n].to_vec(),
            )?);
            offset += n;
        }
        SiteDataset::new(out)
    }
}

/// A simulated site together with the truth that produced it.
#[derive(Clone, Debug)]
pub struct SyntheticSite {
    pub dataset: SiteDataset,
    pub model: Model,
    pub theta: ParameterVector,
    pub omega: MeanCoefficients,
    /// `Xω₀` at every stacked point.
    pub mean: Vec<f64>,
    /// `δ` at every stacked point.
    pub deviation: Vec<f64>,
}

impl SyntheticSite {
    /// Splits the soundings into those not listed and those listed in
    /// `held_out` (by id).
    pub fn split(&self, held_out: &[&str]) -> Result<(SiteDataset, SiteDataset)> {
        let (held, kept): (Vec<Sounding>, Vec<Sounding>) =
            self.dataset.soundings().iter().cloned().partition(|s| held_out.contains(&s.id.as_str()));
        if held.len() != held_out.len() {
            return Err(GeoWarpError::Data("held-out id not present in the site".into()));
        }
        Ok((SiteDataset::new(kept)?, SiteDataset::new(held)?))
    }

    /// True mean profile `μ₀(h)`.
    pub fn true_mean(&self, h: f64) -> Result<f64> {
        self.model.mean_at(&self.omega, h)
    }
}

/// Joint draw of the deviation process at `coords`: dense Cholesky for small
/// sites, otherwise the Vecchia factor with a large parent set.
fn simulate_deviation(
    model: &Model,
    theta: &ParameterVector,
    layout: &SiteLayout,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<Vec<f64>> {
    let coords = layout.coordinates();
    let n = coords.len();
    let pp = CovarianceModel::new(model, theta)?.prepare_coords(&coords)?;
    let mean_var = (0..n).map(|i| pp.variance(i)).sum::<f64>() / n as f64;
    let e: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    if mean_var == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let jitter = SIMULATION_JITTER * mean_var;
    let cov = |i: usize, j: usize| pp.covariance(i, j) + if i == j { jitter } else { 0.0 };
    if n <= DENSE_CAP {
        let sigma = DMatrix::from_fn(n, n, cov);
        let l = sigma
            .cholesky()
            .ok_or_else(|| GeoWarpError::numeric("deviation covariance is not positive definite"))?
            .l();
        Ok((l * DVector::from_vec(e)).as_slice().to_vec())
    } else {
        let placeholder = layout.dataset(&vec![0.0; n])?;
        let plan = build_plan(&placeholder, SIMULATION_PARENTS, seed)?;
        factorize(&plan, cov)?.half_factor_transpose_solve(&e)
    }
}

/// Simulates `Z = Xω₀ + δ + ε` at the layout's points.
pub fn generate_site(
    model: &Model,
    theta: &ParameterVector,
    omega: &MeanCoefficients,
    layout: &SiteLayout,
    seed: u64,
) -> Result<SyntheticSite> {
    if !(theta.sigma_eps_sq >= 0.0) {
        return Err(GeoWarpError::domain("sigma_eps_sq must be non-negative"));
    }
    // A noiseless site is allowed here; the process part is validated alone.
    let mut process = theta.clone();
    if process.sigma_eps_sq == 0.0 {
        process.sigma_eps_sq = 1.0;
    }
    model.validate(&process)?;
    crate::error::check_len(model.k_beta(), omega.beta.len())?;
    let n = layout.n_points();
    if n > SIMULATION_CAP {
        return Err(GeoWarpError::Size(format!("{n} points exceed the simulation limit of {SIMULATION_CAP}")));
    }
    if n == 0 {
        return Err(GeoWarpError::Data("layout has no points".into()));
    }
    let coords = layout.coordinates();
    let mean = coords.iter().map(|c| model.mean_at(omega, c.h)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deviation = simulate_deviation(model, &process, layout, &mut rng, seed)?;
    rng.set_stream(1);
    let sd_eps = theta.sigma_eps_sq.sqrt();
    let values: Vec<f64> = mean
        .iter()
        .zip(&deviation)
        .map(|(m, d)| {
            let e: f64 = StandardNormal.sample(&mut rng);
            m + d + sd_eps * e
        })
        .collect();
    Ok(SyntheticSite {
        dataset: layout.dataset(&values)?,
        model: model.clone(),
        theta: theta.clone(),
        omega: omega.clone(),
        mean,
        deviation,
    })
}

/// Shape of a synthetic truth. The mean profile is
/// `1 + 0.04 h + 0.35 sin(h/3) + 0.4 exp(-((h - 2h_max/3)/2.5)²)` and the
/// log-variance carries a Gaussian bump centred at a third of the depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub baseline_variance: f64,
    /// Height of the bump in `log σ_δ²`.
    pub variance_bump: f64,
    pub horizontal_length: f64,
    /// Vertical warping slope (1/m) at the surface and at `h_max`.
    pub vertical_slopes: (f64, f64),
    /// Canonical partial correlations of the geometric warping.
    pub cpc: Vec<f64>,
    pub sigma_eps_sq: f64,
}

impl TruthSpec {
    /// Truth of the standard site.
    pub fn standard() -> Self {
        Self {
            baseline_variance: 0.015,
            variance_bump: 1.2,
            horizontal_length: 10.0,
            vertical_slopes: (2.4, 0.8),
            cpc: vec![0.3, 0.0, 0.0],
            sigma_eps_sq: 0.03,
        }
    }

    /// Truth of the smaller cross-validation site, with stronger horizontal
    /// correlation so that kriging between soundings pays off.
    pub fn cross_validation() -> Self {
        Self {
            baseline_variance: 0.04,
            variance_bump: 1.0,
            horizontal_length: 25.0,
            vertical_slopes: (2.0, 0.8),
            cpc: vec![0.2, 0.0, 0.0],
            sigma_eps_sq: 0.03,
        }
    }

    fn mean_shape(h: f64, h_max: f64) -> f64 {
        0.35 * (h / 3.0).sin() + 0.4 * (-((h - 2.0 * h_max / 3.0) / 2.5).powi(2)).exp()
    }

    fn variance_shape(&self, h: f64, h_max: f64) -> f64 {
        self.variance_bump * (-((h - h_max / 3.0) / 4.0).powi(2)).exp()
    }

    /// `(θ₀, ω₀)` for a full-variant model. Spline coefficients take the
    /// target curves' values at the Greville abscissae.
    pub fn truth(&self, model: &Model) -> Result<(ParameterVector, MeanCoefficients)> {
        if model.variant() != Variant::Full {
            return Err(GeoWarpError::config("synthetic truths are defined for the full model"));
        }
        let h_max = model.domain().h_max();
        let beta = greville(model.mean_basis().knots()).iter().map(|&x| Self::mean_shape(x, h_max)).collect();
        let omega = MeanCoefficients { alpha: [1.0, 0.04], beta };

        let mut theta = model.default_theta();
        theta.kappa[0] = self.baseline_variance.ln();
        let zeta: Vec<f64> =
            greville(model.variance_basis().knots()).iter().map(|&x| self.variance_shape(x, h_max)).collect();
        theta.kappa[1..].copy_from_slice(&zeta);
        let d = model.dim();
        for axis in 0..d {
            let l = model.cfg().awu_orders[axis] as f64;
            let g = model.domain().extent(axis) / (self.horizontal_length * l);
            theta.gamma[axis] = vec![g; l as usize];
        }
        let lv = model.cfg().awu_orders[d];
        let (top, bottom) = self.vertical_slopes;
        theta.gamma[d] = (0..lv)
            .map(|j| {
                let t = if lv > 1 { j as f64 / (lv - 1) as f64 } else { 0.5 };
                (top + t * (bottom - top)) * h_max / lv as f64
            })
            .collect();
        let k = d + 1;
        if self.cpc.len() != k * (k - 1) / 2 {
            return Err(GeoWarpError::Dimension { expected: k * (k - 1) / 2, got: self.cpc.len() });
        }
        let y: Vec<f64> = self.cpc.iter().map(|c| c.atanh()).collect();
        theta.r = cpc_to_factor(&y, k).0;
        theta.sigma_eps_sq = self.sigma_eps_sq;
        theta.sigma_beta_sq = 1e-3;
        theta.ell_zeta = 2.0;
        theta.sigma_zeta_sq = 0.5;
        model.validate(&theta)?;
        Ok((theta, omega))
    }
}

fn greville(knots: &[f64]) -> Vec<f64> {
    (0..knots.len() - 4).map(|k| (knots[k + 1] + knots[k + 2] + knots[k + 3]) / 3.0).collect()
}

/// Training sounding locations of the standard site (m).
pub const STANDARD_TRAINING: [[f64; 2]; 10] = [
    [5.0, 8.0],
    [38.0, 4.0],
    [72.0, 12.0],
    [96.0, 6.0],
    [20.0, 40.0],
    [55.0, 35.0],
    [90.0, 45.0],
    [8.0, 78.0],
    [45.0, 70.0],
    [80.0, 95.0],
];
/// Held-out sounding locations of the standard site, inside the training
/// bounding box.
pub const STANDARD_HELD_OUT: [[f64; 2]; 3] = [[30.0, 22.0], [65.0, 58.0], [28.0, 88.0]];

/// The standard site: training soundings `T01..T10` and held-out `H01..H03`.
#[derive(Clone, Debug)]
pub struct StandardSite {
    pub site: SyntheticSite,
    pub training: SiteDataset,
    pub held_out: SiteDataset,
}

pub fn standard_layout() -> SiteLayout {
    let depths = regular_depths(0.25, 41.0, 0.05);
    let train: Vec<Vec<f64>> = STANDARD_TRAINING.iter().map(|p| p.to_vec()).collect();
    let held: Vec<Vec<f64>> = STANDARD_HELD_OUT.iter().map(|p| p.to_vec()).collect();
    let mut layout = SiteLayout::regular("T", &train, &depths);
    layout.soundings.extend(SiteLayout::regular("H", &held, &depths).soundings);
    layout
}

/// Full model over `[0, 100]² × [0, 41]` with default settings.
pub fn standard_model() -> Result<Model> {
    Model::new(ModelConfig::default(), Domain::new(vec![0.0, 0.0, 0.0], vec![100.0, 100.0, 41.0])?)
}

pub fn standard_site(seed: u64) -> Result<StandardSite> {
    let model = standard_model()?;
    let (theta, omega) = TruthSpec::standard().truth(&model)?;
    let site = generate_site(&model, &theta, &omega, &standard_layout(), seed)?;
    let held: Vec<String> = (1..=STANDARD_HELD_OUT.len()).map(|i| format!("H{i:02}")).collect();
    let held: Vec<&str> = held.iter().map(String::as_str).collect();
    let (training, held_out) = site.split(&held)?;
    Ok(StandardSite { site, training, held_out })
}

/// Six soundings on a 60 m square, 0.25–15.25 m at 0.1 m.
pub fn cv_layout() -> SiteLayout {
    let locations: Vec<Vec<f64>> =
        [[4.0, 6.0], [30.0, 2.0], [57.0, 10.0], [15.0, 33.0], [44.0, 40.0], [26.0, 58.0]]
            .iter()
            .map(|p| p.to_vec())
            .collect();
    SiteLayout::regular("C", &locations, &regular_depths(0.25, 15.25, 0.1))
}

pub fn cv_model() -> Result<Model> {
    Model::new(ModelConfig::default(), Domain::new(vec![0.0, 0.0, 0.0], vec![60.0, 60.0, 16.0])?)
}

/// Nonstationary site used for cross-validation comparisons.
pub fn cv_site(seed: u64) -> Result<SyntheticSite> {
    let model = cv_model()?;
    let (theta, omega) = TruthSpec::cross_validation().truth(&model)?;
    generate_site(&model, &theta, &omega, &cv_layout(), seed)
}

/// Parameters of the columns simulated by [`nu_study_site`].
pub const NU_STUDY_TAU1_SQ: f64 = 0.1;
pub const NU_STUDY_TAU2_SQ: f64 = 0.001;
pub const NU_STUDY_UPSILON: f64 = 1.0;

/// Independent 1-D columns `μ(h) + R(h)` 50 m apart with
/// `Cov(R(h), R(h')) = τ₁² M_ν(υ|h - h'|) + τ₂² 1(h = h')`, sampled every
/// 5 cm from 0.25 m.
pub fn nu_study_site(nu: f64, n_columns: usize, n_depths: usize, seed: u64) -> Result<SiteDataset> {
    let depths: Vec<f64> = (0..n_depths).map(|i| ((0.25 + 0.05 * i as f64) * 1e9).round() / 1e9).collect();
    let matern = Matern::new(nu)?;
    let cov = DMatrix::from_fn(n_depths, n_depths, |i, j| {
        let c = NU_STUDY_TAU1_SQ * matern.value(NU_STUDY_UPSILON * (depths[i] - depths[j]).abs());
        if i == j {
            c + NU_STUDY_TAU2_SQ
        } else {
            c
        }
    });
    let l = cov.cholesky().ok_or_else(|| GeoWarpError::numeric("column covariance is not positive definite"))?.l();
    let mut soundings = Vec::with_capacity(n_columns);
    for c in 0..n_columns {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let e = DVector::from_iterator(n_depths, (0..n_depths).map(|_| StandardNormal.sample(&mut rng)));
        let r = &l * e;
        let values = depths.iter().zip(r.iter()).map(|(h, r)| 1.0 + 0.04 * h + 0.3 * (h / 2.0).sin() + r).collect();
        soundings.push(Sounding::new(format!("N{:02}", c + 1), vec![50.0 * c as f64], depths.clone(), values)?);
    }
    SiteDataset::new(soundings)
}

/// Per-sounding residuals after subtracting the site-wide mean of each depth
/// bin.
pub fn depth_bin_residuals(ds: &SiteDataset, width: f64) -> Vec<Vec<f64>> {
    let mut sums: std::collections::BTreeMap<i64, (f64, usize)> = Default::default();
    for s in ds.soundings() {
        for (h, z) in s.depths.iter().zip(&s.values) {
            let e = sums.entry(depth_bin(*h, width)).or_insert((0.0, 0));
            e.0 += z;
            e.1 += 1;
        }
    }
    ds.soundings()
        .iter()
        .map(|s| {
            s.depths
                .iter()
                .zip(&s.values)
                .map(|(h, z)| {
                    let (sum, n) = sums[&depth_bin(*h, width)];
                    z - sum / n as f64
                })
                .collect()
        })
        .collect()
}

/// Parameters of one column's Gaussian process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnParams {
    pub tau1_sq: f64,
    pub tau2_sq: f64,
    pub upsilon: f64,
}

fn regular_spacing(depths: &[f64]) -> bool {
    if depths.len() < 3 {
        return true;
    }
    let step = depths[1] - depths[0];
    depths.windows(2).all(|w| ((w[1] - w[0]) - step).abs() <= 1e-9 * step.abs().max(1.0))
}

/// Zero-mean Gaussian log-density for a Toeplitz covariance with first
/// column `acov`, by the Durbin–Levinson recursion. `None` if the
/// recursion breaks down numerically.
fn toeplitz_log_density(acov: &[f64], r: &[f64]) -> Option<f64> {
    let n = r.len();
    let mut phi = vec![0.0; n];
    let mut prev = vec![0.0; n];
    let mut v = acov[0];
    if !(v > 0.0) {
        return None;
    }
    let mut logdet = v.ln();
    let mut quad = r[0] * r[0] / v;
    for k in 1..n {
        let num = acov[k] - (0..k - 1).map(|j| phi[j] * acov[k - 1 - j]).sum::<f64>();
        let kappa = num / v;
        if !(kappa.abs() < 1.0) {
            return None;
        }
        prev[..k - 1].copy_from_slice(&phi[..k - 1]);
        for j in 0..k - 1 {
            phi[j] = prev[j] - kappa * prev[k - 2 - j];
        }
        phi[k - 1] = kappa;
        v *= 1.0 - kappa * kappa;
        if !(v > 0.0) {
            return None;
        }
        let pred: f64 = (0..k).map(|j| phi[j] * r[k - 1 - j]).sum();
        let e = r[k] - pred;
        logdet += v.ln();
        quad += e * e / v;
    }
    Some(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad))
}

fn dense_log_density(cov: DMatrix<f64>, r: &[f64]) -> Result<f64> {
    let n = r.len();
    let chol = cov.cholesky().ok_or_else(|| GeoWarpError::numeric("column covariance is not positive definite"))?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let x = DVector::from_column_slice(r);
    let quad = x.dot(&chol.solve(&x));
    Ok(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad))
}

/// Log-likelihood of one column of residuals under
/// `τ₁² M_ν(υ|Δh|) + τ₂² I`.
pub fn column_log_likelihood(depths: &[f64], r: &[f64], nu: f64, p: &ColumnParams) -> Result<f64> {
    crate::error::check_len(depths.len(), r.len())?;
    if !(p.tau1_sq >= 0.0 && p.tau2_sq >= 0.0 && p.upsilon > 0.0 && p.tau1_sq + p.tau2_sq > 0.0) {
        return Err(GeoWarpError::numeric(format!("invalid column parameters {p:?}")));
    }
    let matern = Matern::new(nu)?;
    let n = r.len();
    if regular_spacing(depths) {
        let step = if n > 1 { depths[1] - depths[0] } else { 0.0 };
        let acov: Vec<f64> = (0..n)
            .map(|k| p.tau1_sq * matern.value(p.upsilon * step * k as f64) + if k == 0 { p.tau2_sq } else { 0.0 })
            .collect();
        if let Some(v) = toeplitz_log_density(&acov, r) {
            return Ok(v);
        }
    }
    let cov = DMatrix::from_fn(n, n, |i, j| {
        p.tau1_sq * matern.value(p.upsilon * (depths[i] - depths[j]).abs()) + if i == j { p.tau2_sq } else { 0.0 }
    });
    dense_log_density(cov, r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuStudySettings {
    pub nus: Vec<f64>,
    pub bin_width: f64,
    /// Starting values of `υ` (1/m); each start uses `τ₁² : τ₂² = 4 : 1`.
    pub upsilon_starts: Vec<f64>,
    pub optimizer: OptimizerSettings,
}

impl Default for NuStudySettings {
    fn default() -> Self {
        Self {
            nus: vec![0.5, 1.5, 2.5, 3.5],
            bin_width: 0.1,
            upsilon_starts: vec![0.5, 2.0, 8.0],
            optimizer: OptimizerSettings { max_iterations: 500, grad_tol: 1e-4, ..OptimizerSettings::default() },
        }
    }
}

/// Maximum-likelihood fit at one `ν`. A fit that did not converge has
/// `log_likelihood = -∞` and `flagged = true`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuFit {
    pub nu: f64,
    pub log_likelihood: f64,
    pub params: Option<ColumnParams>,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuSoundingResult {
    pub id: String,
    pub fits: Vec<NuFit>,
    /// Index into `nus` of the highest likelihood, if any fit converged.
    pub best: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuStudyResult {
    pub nus: Vec<f64>,
    pub soundings: Vec<NuSoundingResult>,
    /// Number of soundings won by each `ν`.
    pub wins: Vec<usize>,
}

/// Box on the log parameters, relative to the column variance.
const LOG_VARIANCE_RANGE: (f64, f64) = (-25.0, 3.0);
const LOG_UPSILON_RANGE: (f64, f64) = (-7.0, 7.0);

fn decode_column(x: &[f64], scale: f64) -> Option<ColumnParams> {
    let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
    if !(inside(x[0], LOG_VARIANCE_RANGE) && inside(x[1], LOG_VARIANCE_RANGE) && inside(x[2], LOG_UPSILON_RANGE)) {
        return None;
    }
    Some(ColumnParams { tau1_sq: scale * x[0].exp(), tau2_sq: scale * x[1].exp(), upsilon: x[2].exp() })
}

/// Maximum-likelihood fit of one column at one `ν` by multi-start L-BFGS on
/// `(log τ₁², log τ₂², log υ)` with central-difference gradients.
pub fn fit_column(depths: &[f64], r: &[f64], nu: f64, settings: &NuStudySettings) -> NuFit {
    let n = r.len() as f64;
    let scale = (r.iter().map(|v| v * v).sum::<f64>() / n).max(1e-12);
    let objective = |x: &[f64]| -> Result<f64> {
        let p = decode_column(x, scale).ok_or_else(|| GeoWarpError::numeric("outside the search box"))?;
        Ok(-column_log_likelihood(depths, r, nu, &p)?)
    };
    let with_grad = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let f = objective(x)?;
        let mut g = vec![0.0; 3];
        for k in 0..3 {
            let step = 1e-5;
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += step;
            xm[k] -= step;
            g[k] = (objective(&xp)? - objective(&xm)?) / (2.0 * step);
        }
        Ok((f, g))
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for &u in &settings.upsilon_starts {
        let x0 = [0.8f64.ln(), 0.2f64.ln(), u.ln()];
        let res = minimize(with_grad, &x0, &settings.optimizer);
        let ok = res.value.is_finite()
            && (res.converged() || (res.reason == StopReason::LineSearchFailed && res.grad_norm < 1e-2));
        if ok && best.as_ref().map_or(true, |(v, _)| res.value < *v) {
            best = Some((res.value, res.x));
        }
    }
    match best {
        Some((v, x)) => NuFit { nu, log_likelihood: -v, params: decode_column(&x, scale), flagged: false },
        None => NuFit { nu, log_likelihood: f64::NEG_INFINITY, params: None, flagged: true },
    }
}

/// Per-sounding comparison of Matérn smoothness values on depth-bin
/// residuals.
pub fn nu_study(ds: &SiteDataset, settings: &NuStudySettings) -> Result<NuStudyResult> {
    if settings.nus.is_empty() {
        return Err(GeoWarpError::config("no smoothness values to compare"));
    }
    for &nu in &settings.nus {
        Matern::new(nu)?;
    }
    let residuals = depth_bin_residuals(ds, settings.bin_width);
    let soundings: Vec<NuSoundingResult> = ds
        .soundings()
        .par_iter()
        .zip(residuals.par_iter())
        .map(|(s, r)| {
            let fits: Vec<NuFit> = settings.nus.iter().map(|&nu| fit_column(&s.depths, r, nu, settings)).collect();
            let best = (0..fits.len())
                .filter(|&i| fits[i].log_likelihood.is_finite())
                .max_by(|&a, &b| fits[a].log_likelihood.total_cmp(&fits[b].log_likelihood).then(b.cmp(&a)));
            NuSoundingResult { id: s.id.clone(), fits, best }
        })
        .collect();
    let mut wins = vec![0; settings.nus.len()];
    for s in &soundings {
        if let Some(b) = s.best {
            wins[b] += 1;
        }
        for f in s.fits.iter().filter(|f| f.flagged) {
            log::warn!("sounding {}: fit at nu={} did not converge", s.id, f.nu);
        }
    }
    Ok(NuStudyResult { nus: settings.nus.clone(), soundings, wins })
}
