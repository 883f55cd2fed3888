//! Proper scoring rules, the depth-only baselines, and leave-one-sounding-out
//! cross-validation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};

use crate::config::{ModelConfig, Variant};
use crate::error::{GeoWarpError, Result};
use crate::infer::{fit_map, MapSettings};
use crate::model::{Domain, Model};
use crate::params::{MeanCoefficients, ParameterVector};
use crate::posterior::PosteriorContext;
use crate::predict::{predict_measurements_with_pairs, PredictSettings};
use crate::site::{depth_bin, Coordinate, SiteDataset, Sounding};
use crate::vecchia::PredictionLayout;

/// `Φ⁻¹(0.975)`.
pub const Z_975: f64 = 1.959_963_984_540_054;
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const LINEAR_VARIANCE_FLOOR: f64 = 1e-12;

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(GeoWarpError::Score(format!("predictive sd must be positive, got {sigma}")))
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

pub fn mse(means: &[f64], obs: &[f64]) -> Result<f64> {
    crate::error::check_len(means.len(), obs.len())?;
    if obs.is_empty() {
        return Err(GeoWarpError::Score("no observations to score".into()));
    }
    Ok(means.iter().zip(obs).map(|(m, y)| (m - y).powi(2)).sum::<f64>() / obs.len() as f64)
}

/// CRPS of `N(μ, σ²)` at `y`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let z = (y - mu) / sigma;
    let n = std_normal();
    Ok(sigma * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - FRAC_1_SQRT_PI))
}

/// CRPS of the empirical distribution of `samples` at `y`,
/// `E|X - y| - ½E|X - X'|`.
pub fn crps_empirical(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() || samples.iter().any(|v| !v.is_finite()) {
        return Err(GeoWarpError::Score("empirical CRPS needs finite samples".into()));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    Ok(crps_sorted(&x, y))
}

fn crps_sorted(x: &[f64], y: f64) -> f64 {
    let n = x.len() as f64;
    let abs = x.iter().map(|v| (v - y).abs()).sum::<f64>() / n;
    let spread: f64 = x.iter().enumerate().map(|(i, v)| (2.0 * (i as f64 + 1.0) - n - 1.0) * v).sum::<f64>();
    abs - spread / (n * n)
}

/// Interval score of the central 95% interval `[lower, upper]`.
pub fn interval_score_95(lower: f64, upper: f64, y: f64) -> Result<f64> {
    if !(upper >= lower) {
        return Err(GeoWarpError::Score(format!("interval upper {upper} below lower {lower}")));
    }
    let a = 0.05;
    let mut s = upper - lower;
    if y < lower {
        s += 2.0 / a * (lower - y);
    }
    if y > upper {
        s += 2.0 / a * (y - upper);
    }
    Ok(s)
}

/// Dawid–Sebastiani score `log σ² + ((y - μ)/σ)²`.
pub fn dss(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(2.0 * sigma.ln() + ((y - mu) / sigma).powi(2))
}

/// Bivariate Dawid–Sebastiani score `log|Σ| + (y - μ)ᵀΣ⁻¹(y - μ)`.
pub fn dss2(mu: [f64; 2], cov: [[f64; 2]; 2], y: [f64; 2]) -> Result<f64> {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    if !(cov[0][0] > 0.0 && det > 0.0 && det.is_finite()) || (cov[0][1] - cov[1][0]).abs() > 1e-12 * det.sqrt() {
        return Err(GeoWarpError::Score("bivariate covariance is not positive definite".into()));
    }
    let (a, b) = (y[0] - mu[0], y[1] - mu[1]);
    let quad = (cov[1][1] * a * a - 2.0 * cov[0][1] * a * b + cov[0][0] * b * b) / det;
    Ok(det.ln() + quad)
}

/// Ordinary least squares on depth with a plug-in residual variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub intercept: f64,
    pub slope: f64,
    pub variance: f64,
    /// Standard errors of intercept and slope.
    pub std_errors: [f64; 2],
    /// The residual variance was zero and has been floored.
    pub floored: bool,
}

impl LinearBaseline {
    pub fn fit(ds: &SiteDataset) -> Result<Self> {
        let h = ds.depths();
        let z = ds.values();
        let n = h.len();
        if n < 3 {
            return Err(GeoWarpError::Score("linear baseline needs at least 3 points".into()));
        }
        let mh = h.iter().sum::<f64>() / n as f64;
        let mz = z.iter().sum::<f64>() / n as f64;
        let shh: f64 = h.iter().map(|x| (x - mh).powi(2)).sum();
        if !(shh > 1e-12 * (1.0 + mh * mh) * n as f64) {
            return Err(GeoWarpError::Score("linear baseline needs at least two distinct depths".into()));
        }
        let shz: f64 = h.iter().zip(&z).map(|(x, y)| (x - mh) * (y - mz)).sum();
        let slope = shz / shh;
        let intercept = mz - slope * mh;
        let rss: f64 = h.iter().zip(&z).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        let raw = rss / (n - 2) as f64;
        let floored = raw < LINEAR_VARIANCE_FLOOR;
        if floored {
            log::warn!("linear baseline has zero residual variance; flooring at {LINEAR_VARIANCE_FLOOR}");
        }
        let variance = raw.max(LINEAR_VARIANCE_FLOOR);
        let se_slope = (raw / shh).sqrt();
        let se_intercept = (raw * (1.0 / n as f64 + mh * mh / shh)).sqrt();
        Ok(Self { intercept, slope, variance, std_errors: [se_intercept, se_slope], floored })
    }

    /// Predictive mean and sd at depth `h`; location plays no part.
    pub fn predict(&self, h: f64) -> (f64, f64) {
        (self.intercept + self.slope * h, self.variance.sqrt())
    }
}

/// Empirical distribution of the training values in each depth bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedBaseline {
    pub width: f64,
    /// Sorted values by bin index.
    pub bins: BTreeMap<i64, Vec<f64>>,
}

impl BinnedBaseline {
    pub fn fit(ds: &SiteDataset, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(GeoWarpError::config(format!("bin width must be positive, got {width}")));
        }
        let mut bins: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for s in ds.soundings() {
            for (h, z) in s.depths.iter().zip(&s.values) {
                bins.entry(depth_bin(*h, width)).or_default().push(*z);
            }
        }
        for v in bins.values_mut() {
            v.sort_by(f64::total_cmp);
        }
        Ok(Self { width, bins })
    }

    pub fn bin(&self, h: f64) -> Option<&[f64]> {
        self.bins.get(&depth_bin(h, self.width)).map(Vec::as_slice)
    }

    pub fn mean(&self, h: f64) -> Option<f64> {
        self.bin(h).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// `p`-quantile of the ECDF of sorted `x`: the smallest value with
/// `F(x) ≥ p`.
fn ecdf_quantile(x: &[f64], p: f64) -> f64 {
    let k = ((p * x.len() as f64).ceil() as usize).clamp(1, x.len());
    x[k - 1]
}

/// Scores of one model on one withheld sounding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundingScores {
    pub id: String,
    pub n_scored: usize,
    pub mse: f64,
    pub crps: f64,
    pub int05: f64,
    pub dss: Option<f64>,
    pub dss2: Option<f64>,
}

/// Predictive summaries at the scored depths of one sounding.
pub struct ForecastSet<'a> {
    pub id: &'a str,
    pub obs: &'a [f64],
    pub mean: &'a [f64],
    pub sd: &'a [f64],
    /// Covariance of each consecutive pair `(i, i + 1)`.
    pub pair_cov: &'a [f64],
}

/// Averages of every rule for a Gaussian forecast of one sounding; DSS2
/// uses consecutive pairs.
pub fn score_gaussian(f: &ForecastSet<'_>) -> Result<SoundingScores> {
    let n = f.obs.len();
    crate::error::check_len(n, f.mean.len())?;
    crate::error::check_len(n, f.sd.len())?;
    crate::error::check_len(n.saturating_sub(1), f.pair_cov.len())?;
    let mut crps = 0.0;
    let mut int05 = 0.0;
    let mut dss_sum = 0.0;
    for i in 0..n {
        let (m, s, y) = (f.mean[i], f.sd[i], f.obs[i]);
        crps += crps_gaussian(m, s, y)?;
        int05 += interval_score_95(m - Z_975 * s, m + Z_975 * s, y)?;
        dss_sum += dss(m, s, y)?;
    }
    let dss2 = if n >= 2 {
        let mut total = 0.0;
        for i in 0..n - 1 {
            let c = f.pair_cov[i];
            let cov = [[f.sd[i].powi(2), c], [c, f.sd[i + 1].powi(2)]];
            total += dss2([f.mean[i], f.mean[i + 1]], cov, [f.obs[i], f.obs[i + 1]])?;
        }
        Some(total / (n - 1) as f64)
    } else {
        None
    };
    let nf = n as f64;
    Ok(SoundingScores {
        id: f.id.to_string(),
        n_scored: n,
        mse: mse(f.mean, f.obs)?,
        crps: crps / nf,
        int05: int05 / nf,
        dss: Some(dss_sum / nf),
        dss2,
    })
}

/// A model compared in cross-validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvModel {
    GeoWarp(Variant),
    Linear,
    Binned,
}

impl CvModel {
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "binned" => Ok(Self::Binned),
            other => Variant::parse(other).map(Self::GeoWarp),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::GeoWarp(v) => v.name().to_string(),
            Self::Linear => "linear".into(),
            Self::Binned => "binned".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvSettings {
    pub config: ModelConfig,
    pub m_fit: usize,
    pub m_predict: usize,
    pub seed: u64,
    pub map: MapSettings,
    pub bin_width: f64,
}

impl Default for CvSettings {
    fn default() -> Self {
        Self {
            config: ModelConfig::default(),
            m_fit: 50,
            m_predict: 100,
            seed: 0,
            map: MapSettings::default(),
            bin_width: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub model: String,
    pub per_sounding: Vec<SoundingScores>,
    pub failed: Vec<FoldFailure>,
    /// Eligible observations dropped because their depth bin was empty.
    pub excluded: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mse,
    Crps,
    Int05,
    Dss,
    Dss2,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Mse, Metric::Crps, Metric::Int05, Metric::Dss, Metric::Dss2];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mse => "MSE",
            Metric::Crps => "CRPS",
            Metric::Int05 => "Int05",
            Metric::Dss => "DSS",
            Metric::Dss2 => "DSS2",
        }
    }

    fn get(self, s: &SoundingScores) -> Option<f64> {
        match self {
            Metric::Mse => Some(s.mse),
            Metric::Crps => Some(s.crps),
            Metric::Int05 => Some(s.int05),
            Metric::Dss => s.dss,
            Metric::Dss2 => s.dss2,
        }
    }
}

/// Site average of one metric for one model, and whether it is the best or
/// not significantly worse than the best.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub model: String,
    pub mean: f64,
    /// One-sided Welch p-value against the best model (1 for the best).
    pub p_value: f64,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub site: String,
    pub models: Vec<ModelScores>,
    pub summary: Vec<MetricSummary>,
}

impl ScoreReport {
    pub fn new(site: &str, models: Vec<ModelScores>) -> Self {
        let summary = summarize(&models);
        Self { site: site.to_string(), models, summary }
    }

    pub fn mean(&self, metric: Metric, model: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.metric == metric && s.model == model).map(|s| s.mean)
    }

    /// Table with one row per metric and model; the site and `all` columns
    /// coincide for a single site.
    pub fn to_csv(&self) -> String {
        let mut out = format!("metric,model,{},all,best\n", self.site);
        for s in &self.summary {
            out.push_str(&format!("{},{},{},{},{}\n", s.metric.name(), s.model, s.mean, s.mean, s.best));
        }
        out
    }
}

/// One-sided Welch test of `mean(b) > mean(a)`; returns the p-value.
pub fn welch_one_sided(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    if na < 2.0 || nb < 2.0 {
        return f64::NAN;
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let var = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (var(a, ma) / na, var(b, mb) / nb);
    let se2 = va + vb;
    if se2 == 0.0 {
        return if mb > ma { 0.0 } else { 1.0 };
    }
    let t = (mb - ma) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t)
}

fn summarize(models: &[ModelScores]) -> Vec<MetricSummary> {
    let mut out = Vec::new();
    for metric in Metric::ALL {
        let values: Vec<(String, Vec<f64>)> = models
            .iter()
            .map(|m| (m.model.clone(), m.per_sounding.iter().filter_map(|s| metric.get(s)).collect::<Vec<_>>()))
            .filter(|(_, v)| !v.is_empty())
            .collect();
        let means: Vec<f64> = values.iter().map(|(_, v)| v.iter().sum::<f64>() / v.len() as f64).collect();
        let Some(best) = (0..means.len()).min_by(|&a, &b| means[a].total_cmp(&means[b])) else {
            continue;
        };
        for (i, (model, v)) in values.iter().enumerate() {
            let p = if i == best { 1.0 } else { welch_one_sided(&values[best].1, v) };
            out.push(MetricSummary {
                metric,
                model: model.clone(),
                mean: means[i],
                p_value: p,
                best: i == best || p >= 0.05,
            });
        }
    }
    out
}

/// Withheld depths that at least one remaining sounding reaches.
fn eligible(ds: &SiteDataset, index: usize) -> Vec<usize> {
    let reach = ds
        .soundings()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != index)
        .map(|(_, s)| s.max_depth())
        .fold(f64::NEG_INFINITY, f64::max);
    let s = &ds.soundings()[index];
    (0..s.len()).filter(|&j| s.depths[j] <= reach).collect()
}

fn score_linear(train: &SiteDataset, test: &Sounding, keep: &[usize]) -> Result<SoundingScores> {
    let lin = LinearBaseline::fit(train)?;
    let obs: Vec<f64> = keep.iter().map(|&j| test.values[j]).collect();
    let (mean, sd): (Vec<f64>, Vec<f64>) = keep.iter().map(|&j| lin.predict(test.depths[j])).unzip();
    let pair_cov = vec![0.0; obs.len().saturating_sub(1)];
    score_gaussian(&ForecastSet { id: &test.id, obs: &obs, mean: &mean, sd: &sd, pair_cov: &pair_cov })
}

fn score_binned(
    train: &SiteDataset,
    test: &Sounding,
    keep: &[usize],
    width: f64,
) -> Result<(Option<SoundingScores>, usize)> {
    let bins = BinnedBaseline::fit(train, width)?;
    let mut excluded = 0;
    let (mut se, mut crps, mut int05, mut n) = (0.0, 0.0, 0.0, 0usize);
    for &j in keep {
        let y = test.values[j];
        let Some(x) = bins.bin(test.depths[j]) else {
            excluded += 1;
            continue;
        };
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        se += (mean - y).powi(2);
        crps += crps_sorted(x, y);
        int05 += interval_score_95(ecdf_quantile(x, 0.025), ecdf_quantile(x, 0.975), y)?;
        n += 1;
    }
    if n == 0 {
        return Ok((None, excluded));
    }
    let nf = n as f64;
    let s = SoundingScores {
        id: test.id.clone(),
        n_scored: n,
        mse: se / nf,
        crps: crps / nf,
        int05: int05 / nf,
        dss: None,
        dss2: None,
    };
    Ok((Some(s), excluded))
}

/// Fits the variant to `train` by MAP and scores measurement predictions at
/// the kept depths of `test`. The model domain is that of the whole site.
pub fn score_geowarp(
    site: &SiteDataset,
    train: &SiteDataset,
    test: &Sounding,
    keep: &[usize],
    variant: Variant,
    s: &CvSettings,
) -> Result<SoundingScores> {
    let cfg = ModelConfig { variant, ..s.config.clone() }.with_dim(site.dim())?;
    let domain = Domain::from_dataset(site, &cfg)?;
    let model = Model::new(cfg, domain)?;
    let ctx = PosteriorContext::new(model, train.clone(), s.m_fit, s.seed)?;
    let fit = fit_map(&ctx, &s.map)?;
    let coords: Vec<Coordinate> = keep.iter().map(|&j| Coordinate::new(&test.location, test.depths[j])).collect();
    let pairs: Vec<(usize, usize)> = (0..coords.len().saturating_sub(1)).map(|i| (i, i + 1)).collect();
    let ps = PredictSettings { m: s.m_predict, seed: s.seed, n_samples: 0, layout: PredictionLayout::Columnar };
    let (pred, pair_cov) = predict_measurements_with_pairs(&ctx, &fit.theta, &fit.omega, &coords, &ps, &pairs)?;
    let obs: Vec<f64> = keep.iter().map(|&j| test.values[j]).collect();
    score_gaussian(&ForecastSet {
        id: &test.id,
        obs: &obs,
        mean: &pred.mean,
        sd: &pred.marginal_sd,
        pair_cov: &pair_cov,
    })
}

/// Leave-one-sounding-out cross-validation of every model.
pub fn cross_validate(ds: &SiteDataset, models: &[CvModel], s: &CvSettings, site: &str) -> Result<ScoreReport> {
    let n = ds.soundings().len();
    if n < 2 {
        return Err(GeoWarpError::Data("cross-validation needs at least two soundings".into()));
    }
    if models.is_empty() {
        return Err(GeoWarpError::config("no models to cross-validate"));
    }
    // Every (model, fold) pair is independent.
    let jobs: Vec<(usize, usize)> = (0..models.len()).flat_map(|m| (0..n).map(move |f| (m, f))).collect();
    let outcomes: Vec<Result<(Option<SoundingScores>, usize)>> = jobs
        .par_iter()
        .map(|&(mi, fold)| {
            let train = ds.without(fold)?;
            let test = &ds.soundings()[fold];
            let keep = eligible(ds, fold);
            if keep.is_empty() {
                return Ok((None, 0));
            }
            match models[mi] {
                CvModel::Linear => Ok((Some(score_linear(&train, test, &keep)?), 0)),
                CvModel::Binned => score_binned(&train, test, &keep, s.bin_width),
                CvModel::GeoWarp(v) => Ok((Some(score_geowarp(ds, &train, test, &keep, v, s)?), 0)),
            }
        })
        .collect();
    let mut results: Vec<ModelScores> = models
        .iter()
        .map(|m| ModelScores { model: m.name(), per_sounding: Vec::new(), failed: Vec::new(), excluded: 0 })
        .collect();
    for (&(mi, fold), outcome) in jobs.iter().zip(outcomes) {
        let id = ds.soundings()[fold].id.clone();
        match outcome {
            Ok((scores, excluded)) => {
                results[mi].excluded += excluded;
                if let Some(sc) = scores {
                    results[mi].per_sounding.push(sc);
                }
            }
            Err(e) => {
                log::warn!("model {} failed on fold {id}: {e}", results[mi].model);
                results[mi].failed.push(FoldFailure { id, error: e.to_string() });
            }
        }
    }
    Ok(ScoreReport::new(site, results))
}

/// Scores GeoWarp measurement predictions at fitted `(θ, ω)` and both
/// baselines fitted to the conditioning data on every depth of the
/// withheld soundings in `test`.
pub fn score_holdout(
    ctx: &PosteriorContext,
    theta: &ParameterVector,
    omega: &MeanCoefficients,
    test: &SiteDataset,
    settings: &PredictSettings,
    bin_width: f64,
) -> Result<Vec<ModelScores>> {
    let train = ctx.dataset();
    let mut out: Vec<ModelScores> = ["geowarp", "linear", "binned"]
        .iter()
        .map(|m| ModelScores { model: m.to_string(), per_sounding: Vec::new(), failed: Vec::new(), excluded: 0 })
        .collect();
    for s in test.soundings() {
        let keep: Vec<usize> = (0..s.len()).collect();
        let coords: Vec<Coordinate> = s.coordinates().collect();
        let pairs: Vec<(usize, usize)> = (0..coords.len().saturating_sub(1)).map(|i| (i, i + 1)).collect();
        let (pred, pair_cov) = predict_measurements_with_pairs(ctx, theta, omega, &coords, settings, &pairs)?;
        out[0].per_sounding.push(score_gaussian(&ForecastSet {
            id: &s.id,
            obs: &s.values,
            mean: &pred.mean,
            sd: &pred.marginal_sd,
            pair_cov: &pair_cov,
        })?);
        out[1].per_sounding.push(score_linear(train, s, &keep)?);
        let (binned, excluded) = score_binned(train, s, &keep, bin_width)?;
        out[2].excluded += excluded;
        out[2].per_sounding.extend(binned);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// `∫ (F(x) - 1{x ≥ y})² dx` by composite Simpson on a wide window.
    fn crps_quadrature(mu: f64, sigma: f64, y: f64) -> f64 {
        let n = std_normal();
        let f = |x: f64| {
            let step = if x >= y { 1.0 } else { 0.0 };
            (n.cdf((x - mu) / sigma) - step).powi(2)
        };
        let lo = mu.min(y) - 12.0 * sigma;
        let hi = mu.max(y) + 12.0 * sigma;
        // Integrate each side of the jump separately.
        let simpson = |a: f64, b: f64| {
            let k = 20_000;
            let h = (b - a) / k as f64;
            let mut s = f(a) + f(b);
            for i in 1..k {
                let x = a + i as f64 * h;
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
            }
            s * h / 3.0
        };
        simpson(lo, y - 1e-15) + simpson(y, hi)
    }

    #[test]
    fn gaussian_crps_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let mu = rng.gen_range(-3.0..3.0);
            let sigma = rng.gen_range(0.2..3.0);
            let y = rng.gen_range(-5.0..5.0);
            let a = crps_gaussian(mu, sigma, y).unwrap();
            let b = crps_quadrature(mu, sigma, y);
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        let v = crps_gaussian(0.0, 1.0, 0.0).unwrap();
        assert!((v - 0.233_695).abs() < 1e-6);
    }

    #[test]
    fn empirical_crps_converges_to_closed_form() {
        // Stratified sample: one uniform draw in each of 10⁶ equal-probability
        // strata, so every x_i is marginally N(0, 1) but the sample mean does
        // not carry the O(n^{-1/2}) noise of an iid sample.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1_000_000;
        let x: Vec<f64> =
            (0..n).map(|i| std_normal().inverse_cdf((i as f64 + rng.gen::<f64>()) / n as f64)).collect();
        for y in [0.0, 0.7, -2.0] {
            let e = crps_empirical(&x, y).unwrap();
            let c = crps_gaussian(0.0, 1.0, y).unwrap();
            assert!((e - c).abs() < 1e-3, "{e} vs {c}");
        }
    }

    #[test]
    fn degenerate_cases() {
        assert_eq!(dss(0.0, 1.0, 0.0).unwrap(), 0.0);
        assert_eq!(interval_score_95(-1.0, 2.0, 0.5).unwrap(), 3.0);
        assert_eq!(interval_score_95(-1.0, 2.0, 3.0).unwrap(), 3.0 + 40.0);
        assert_eq!(crps_empirical(&[2.0, 2.0, 2.0], 2.0).unwrap(), 0.0);
        assert_eq!(crps_empirical(&[2.0, 2.0], 3.5).unwrap(), 1.5);
        assert!(crps_gaussian(0.0, 0.0, 1.0).is_err());
        assert!(dss(0.0, -1.0, 1.0).is_err());
        assert!(interval_score_95(1.0, 0.0, 0.5).is_err());
        assert!(dss2([0.0; 2], [[1.0, 1.0], [1.0, 1.0]], [0.0; 2]).is_err());
    }

    #[test]
    fn dss2_matches_dense_formula() {
        let cov = [[2.0, 0.6], [0.6, 1.5]];
        let m = nalgebra::Matrix2::<f64>::new(2.0, 0.6, 0.6, 1.5);
        let r = nalgebra::Vector2::new(0.3, -1.1);
        let expected = m.determinant().ln() + (r.transpose() * m.try_inverse().unwrap() * r)[0];
        let got = dss2([1.0, 0.0], cov, [1.3, -1.1]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        // Independent pair: sum of the univariate scores.
        let a = dss2([0.0, 0.0], [[1.0, 0.0], [0.0, 4.0]], [0.5, 1.0]).unwrap();
        let b = dss(0.0, 1.0, 0.5).unwrap() + dss(0.0, 2.0, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn crps_is_proper_for_sigma() {
        // Expected score under N(0, 1) truth over a grid of forecast sds.
        let n = std_normal();
        let expected = |s: f64| {
            let k = 4001;
            (0..k)
                .map(|i| {
                    let y = -8.0 + 16.0 * i as f64 / (k - 1) as f64;
                    crps_gaussian(0.0, s, y).unwrap() * n.pdf(y) * 16.0 / (k - 1) as f64
                })
                .sum::<f64>()
        };
        let grid = [0.5, 0.8, 0.9, 1.0, 1.1, 1.25, 2.0];
        let scores: Vec<f64> = grid.iter().map(|&s| expected(s)).collect();
        let best = (0..grid.len()).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        assert_eq!(grid[best], 1.0);
    }

    proptest! {
        #[test]
        fn scores_are_nonnegative(mu in -5.0..5.0f64, s in 0.01..5.0f64, y in -10.0..10.0f64) {
            prop_assert!(crps_gaussian(mu, s, y).unwrap() >= 0.0);
            prop_assert!(interval_score_95(mu - s, mu + s, y).unwrap() >= 0.0);
        }

        #[test]
        fn empirical_crps_is_nonnegative(x in proptest::collection::vec(-5.0..5.0f64, 1..40), y in -6.0..6.0f64) {
            prop_assert!(crps_empirical(&x, y).unwrap() >= -1e-12);
        }
    }

    fn linear_site(noise: f64, seed: u64) -> SiteDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let soundings = (0..4)
            .map(|i| {
                let depths: Vec<f64> = (1..=60).map(|k| k as f64 * 0.1).collect();
                let values = depths
                    .iter()
                    .map(|h| 2.0 + 0.3 * h + noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Sounding::new(format!("L{i}"), vec![10.0 * i as f64, 0.0], depths, values).unwrap()
            })
            .collect();
        SiteDataset::new(soundings).unwrap()
    }

    #[test]
    fn linear_baseline_recovers_truth() {
        let lin = LinearBaseline::fit(&linear_site(0.2, 3)).unwrap();
        assert!((lin.intercept - 2.0).abs() < 3.0 * lin.std_errors[0]);
        assert!((lin.slope - 0.3).abs() < 3.0 * lin.std_errors[1]);
        assert!(!lin.floored);
        let exact = LinearBaseline::fit(&linear_site(0.0, 3)).unwrap();
        assert!(exact.floored);
        assert_eq!(exact.variance, LINEAR_VARIANCE_FLOOR);
        assert_eq!(lin.predict(1.5), lin.predict(1.5));
    }

    #[test]
    fn linear_baseline_rejects_single_depth() {
        let s = Sounding::new("a", vec![0.0], vec![1.0], vec![1.0]).unwrap();
        let t = Sounding::new("b", vec![1.0], vec![1.0], vec![2.0]).unwrap();
        let u = Sounding::new("c", vec![2.0], vec![1.0], vec![3.0]).unwrap();
        assert!(LinearBaseline::fit(&SiteDataset::new(vec![s, t, u]).unwrap()).is_err());
    }

    #[test]
    fn binned_constant_bin_and_boundaries() {
        let a = Sounding::new("a", vec![0.0], vec![0.3, 0.35, 0.41], vec![1.0, 1.0, 5.0]).unwrap();
        let ds = SiteDataset::new(vec![a]).unwrap();
        let b = BinnedBaseline::fit(&ds, 0.1).unwrap();
        assert_eq!(b.mean(0.32), Some(1.0));
        assert_eq!(b.mean(0.4), Some(5.0));
        assert_eq!(b.mean(0.29), None);
        assert_eq!(crps_sorted(b.bin(0.3).unwrap(), 1.7), 0.7);
    }

    #[test]
    fn binned_beats_linear_on_nonlinear_profile() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let soundings: Vec<Sounding> = (0..5)
            .map(|i| {
                let depths: Vec<f64> = (1..=100).map(|k| k as f64 * 0.1).collect();
                let values = depths.iter().map(|h| (2.0 * h).sin() + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
                Sounding::new(format!("S{i}"), vec![5.0 * i as f64], depths, values).unwrap()
            })
            .collect();
        let ds = SiteDataset::new(soundings).unwrap();
        let r = cross_validate(&ds, &[CvModel::Linear, CvModel::Binned], &CvSettings::default(), "s").unwrap();
        assert!(r.mean(Metric::Mse, "binned").unwrap() <= r.mean(Metric::Mse, "linear").unwrap());
        assert!(r.mean(Metric::Dss, "binned").is_none());
        assert_eq!(r.models[0].per_sounding.len(), 5);
    }

    #[test]
    fn two_soundings_make_two_folds() {
        let ds = linear_site(0.1, 1);
        let two = SiteDataset::new(ds.soundings()[..2].to_vec()).unwrap();
        let r = cross_validate(&two, &[CvModel::Linear], &CvSettings::default(), "s").unwrap();
        assert_eq!(r.models[0].per_sounding.len(), 2);
        assert_eq!(r.models[0].per_sounding[0].id, "L0");
    }

    #[test]
    fn eligibility_uses_other_soundings() {
        let a = Sounding::new("a", vec![0.0], vec![1.0, 2.0, 3.0], vec![0.0; 3]).unwrap();
        let b = Sounding::new("b", vec![1.0], vec![1.0, 2.0], vec![0.0; 2]).unwrap();
        let ds = SiteDataset::new(vec![a, b]).unwrap();
        assert_eq!(eligible(&ds, 0), vec![0, 1]);
        assert_eq!(eligible(&ds, 1), vec![0, 1]);
    }

    #[test]
    fn welch_test_direction() {
        let a = [1.0, 1.1, 0.9, 1.05, 0.95];
        let b = [2.0, 2.1, 1.9, 2.05, 1.95];
        assert!(welch_one_sided(&a, &b) < 1e-4);
        assert!(welch_one_sided(&b, &a) > 0.99);
        assert!((welch_one_sided(&a, &a) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn model_names_parse() {
        for name in ["full", "nowarp", "cv", "nowarpcv", "vertcv", "wncv", "linear", "binned"] {
            assert_eq!(CvModel::parse(name).unwrap().name(), name);
        }
        assert!(CvModel::parse("bcs").is_err());
    }
}
