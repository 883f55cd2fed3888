//! Acceptance suite. Every check prints one `criterion N: PASS|FAIL` line
//! with the measured quantities before asserting.
//!
//! The slow checks (5, 8 and 10) fit the 8,160-point synthetic site and the
//! small cross-validation site; expect the whole file to take a while on a
//! single core even with `opt-level = 3`.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use geowarp::bspline::BSplineBasis;
use geowarp::config::{ModelConfig, Variant};
use geowarp::cov::{data_covariance, deviation_matrix, matern, CovarianceModel, Matern};
use geowarp::infer::{fit_map, MapFit, MapSettings, OptimizerSettings};
use geowarp::model::{Domain, Model};
use geowarp::posterior::PosteriorContext;
use geowarp::predict::{conditional_covariance, predict, predict_measurements, PredictSettings};
use geowarp::prior::mean_prior_covariance;
use geowarp::score::{
    crps_empirical, crps_gaussian, cross_validate, dss, interval_score_95, CvModel, CvSettings, Metric,
};
use geowarp::site::{Coordinate, SiteDataset, Sounding};
use geowarp::synth::{
    cv_site, nu_study, nu_study_site, regular_depths, standard_model, standard_site, NuStudySettings,
    StandardSite, TruthSpec,
};
use geowarp::vecchia::{build_plan, factorize};
use geowarp::warp::AxialWarping;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn report(n: u32, pass: bool, detail: String) {
    // Written past the test harness's output capture so the line shows up
    // in every run, passing or not.
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(pass, "criterion {n} failed: {detail}");
}

fn dense_log_density(sigma: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
    let chol = sigma.clone().cholesky().expect("dense covariance is positive definite");
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    -0.5 * (z.len() as f64 * (2.0 * PI).ln() + log_det + z.dot(&chol.solve(z)))
}

/// Soundings at `locations`, each with `depths`, values drawn from `N(0, 1)`
/// around a gentle trend.
fn random_site(rng: &mut ChaCha8Rng, locations: &[[f64; 2]], depths: &[Vec<f64>]) -> SiteDataset {
    let soundings = locations
        .iter()
        .zip(depths)
        .enumerate()
        .map(|(i, (loc, hs))| {
            let values = hs.iter().map(|h| 0.2 * h + rng.gen_range(-1.0..1.0)).collect();
            Sounding::new(format!("S{i}"), loc.to_vec(), hs.clone(), values).unwrap()
        })
        .collect();
    SiteDataset::new(soundings).unwrap()
}

fn random_depths(rng: &mut ChaCha8Rng, count: usize, h_max: f64) -> Vec<f64> {
    let mut hs: Vec<f64> = (0..count).map(|_| rng.gen_range(0.25..h_max)).collect();
    hs.sort_by(f64::total_cmp);
    hs.dedup();
    hs
}

fn random_chart(model: &Model, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..model.chart_dim()).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

fn small_model(variant: Variant, h_max: f64) -> Model {
    let cfg = ModelConfig { variant, delta_mu: 0.25, delta_sigma: 1.0, ..ModelConfig::default() };
    Model::new(cfg, Domain::new(vec![0.0, 0.0, 0.0], vec![30.0, 30.0, h_max]).unwrap()).unwrap()
}

#[test]
fn criterion_01_vecchia_exactness() {
    let start = Instant::now();
    let model = small_model(Variant::Full, 8.0);
    let (theta, _) = TruthSpec::cross_validation().truth(&model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let locations = [[3.0, 4.0], [18.0, 9.0], [11.0, 27.0], [26.0, 22.0]];
    let depths: Vec<Vec<f64>> = (0..4).map(|_| random_depths(&mut rng, 50, 7.9)).collect();
    let ds = random_site(&mut rng, &locations, &depths);
    let n = ds.n_points();
    assert!(n <= 200);
    let z: Vec<f64> = ds.values();

    let prepared = CovarianceModel::new(&model, &theta).unwrap().prepare_coords(&ds.coordinates()).unwrap();
    let cov = |i: usize, j: usize| prepared.covariance(i, j) + if i == j { theta.sigma_eps_sq } else { 0.0 };
    let plan = build_plan(&ds, n.next_multiple_of(2), 4).unwrap();
    let vecchia = factorize(&plan, cov).unwrap().log_density(&z).unwrap();
    let sigma = data_covariance(&model, &theta, &ds.coordinates()).unwrap();
    let dense = dense_log_density(&sigma, &DVector::from_vec(z));
    let err = (vecchia - dense).abs();
    let elapsed = start.elapsed();
    report(
        1,
        err < 1e-8 && elapsed < Duration::from_secs(10),
        format!("n = {n}, |vecchia - dense| = {err:.2e}, runtime {elapsed:.2?}"),
    );
}

#[test]
fn criterion_02_marginal_likelihood_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut max_n = 0;
    let mut max_k = 0;
    for instance in 0..20 {
        let variant = Variant::ALL[instance % Variant::ALL.len()];
        let model = small_model(variant, 5.0);
        let n_sound = rng.gen_range(2..=4);
        let locations: Vec<[f64; 2]> =
            (0..n_sound).map(|_| [rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0)]).collect();
        let depths: Vec<Vec<f64>> = (0..n_sound)
            .map(|_| {
                let count = rng.gen_range(10..=37);
                random_depths(&mut rng, count, 4.9)
            })
            .collect();
        let ds = random_site(&mut rng, &locations, &depths);
        let n = ds.n_points();
        let ctx = PosteriorContext::new(model, ds, n.next_multiple_of(2), instance as u64).unwrap();
        let (theta, _) = ctx.model().decode(&random_chart(ctx.model(), &mut rng)).unwrap();

        let x = ctx.design_matrix();
        let s_omega = mean_prior_covariance(ctx.model(), theta.sigma_beta_sq).unwrap();
        let s_z = data_covariance(ctx.model(), &theta, &ctx.dataset().coordinates()).unwrap();
        let total = &x * s_omega * x.transpose() + s_z;
        let dense = dense_log_density(&total, &DVector::from_vec(ctx.dataset().values()));
        let fast = ctx.marginal_log_likelihood(&theta).unwrap();
        worst = worst.max((fast - dense).abs());
        max_n = max_n.max(n);
        max_k = max_k.max(ctx.model().k_beta());
    }
    report(
        2,
        worst < 1e-7 && max_n <= 150 && max_k <= 30,
        format!("20 instances (N <= {max_n}, K_beta = {max_k}), max |error| = {worst:.2e}"),
    );
}

/// Three soundings with a linear trend, as used by the gradient check.
fn three_sounding_fixture() -> SiteDataset {
    let soundings = [[0.0, 0.0], [7.0, 3.0], [20.0, 12.0]]
        .iter()
        .enumerate()
        .map(|(i, loc)| {
            let depths: Vec<f64> = (0..12).map(|j| 0.25 + 0.35 * j as f64 + 0.05 * i as f64).collect();
            let values = depths.iter().map(|h| 0.1 * h + (i as f64 + 0.3 * h).sin()).collect();
            Sounding::new(format!("c{i}"), loc.to_vec(), depths, values).unwrap()
        })
        .collect();
    SiteDataset::new(soundings).unwrap()
}

#[test]
fn criterion_03_gradient_check() {
    let ds = three_sounding_fixture();
    let cfg = ModelConfig { delta_mu: 0.5, delta_sigma: 1.0, ..ModelConfig::default() };
    let model = Model::for_dataset(cfg, &ds).unwrap();
    let ctx = PosteriorContext::new(model, ds, 10, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = random_chart(ctx.model(), &mut rng);
        let (_, g) = ctx.chart_value_and_gradient(&x, true).unwrap();
        let step = 1e-5;
        let fd: Vec<f64> = (0..x.len())
            .map(|k| {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[k] += step;
                xm[k] -= step;
                (ctx.chart_value(&xp, true).unwrap() - ctx.chart_value(&xm, true).unwrap()) / (2.0 * step)
            })
            .collect();
        let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / scale);
    }
    report(3, worst < 1e-4, format!("20 random points, max relative error {worst:.2e}"));
}

#[test]
fn criterion_04_prediction_oracle() {
    let model = small_model(Variant::Full, 6.0);
    let (theta, omega) = TruthSpec::cross_validation().truth(&model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let locations = [[4.0, 5.0], [20.0, 8.0], [12.0, 25.0]];
    let depths: Vec<Vec<f64>> = (0..3).map(|_| random_depths(&mut rng, 30, 5.9)).collect();
    let ds = random_site(&mut rng, &locations, &depths);
    let n = ds.n_points();
    let mut targets: Vec<Coordinate> = (0..40)
        .map(|i| {
            let s = if i % 4 == 0 { [4.0, 5.0] } else { [rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0)] };
            Coordinate::new(&s, rng.gen_range(0.25..5.9))
        })
        .collect();
    // One target at an observed coordinate.
    targets.push(ds.coordinates()[7].clone());
    let n_pred = targets.len();
    assert!(n + n_pred <= 150);

    let ctx = PosteriorContext::new(model.clone(), ds.clone(), n.next_multiple_of(2), 4).unwrap();
    let settings = PredictSettings { m: 2 * n.max(n_pred).next_multiple_of(2), seed: 9, ..PredictSettings::default() };
    let p = predict(&ctx, &theta, &omega, &targets, &settings).unwrap();
    let c = conditional_covariance(&ctx, &theta, &omega, &targets, &settings).unwrap();

    let mut all = ds.coordinates();
    all.extend(targets.iter().cloned());
    let k = deviation_matrix(&model, &theta, &all).unwrap();
    let k_nn = k.view((0, 0), (n, n)).into_owned() + DMatrix::identity(n, n) * theta.sigma_eps_sq;
    let k_pn = k.view((n, 0), (n_pred, n)).into_owned();
    let k_pp = k.view((n, n), (n_pred, n_pred)).into_owned();
    let mu = |c: &Coordinate| model.mean_at(&omega, c.h).unwrap();
    let r = DVector::from_iterator(n, ds.coordinates().iter().zip(ds.values()).map(|(c, z)| z - mu(c)));
    let chol = k_nn.cholesky().unwrap();
    let mean = DVector::from_iterator(n_pred, targets.iter().map(mu)) + &k_pn * chol.solve(&r);
    let cov = &k_pp - &k_pn * chol.solve(&k_pn.transpose());

    let mean_err = (DVector::from_vec(p.mean.clone()) - mean).amax();
    let cov_err = (c - cov).amax();
    report(
        4,
        mean_err < 1e-6 && cov_err < 1e-6,
        format!("n = {n}, targets = {n_pred}, mean error {mean_err:.2e}, covariance error {cov_err:.2e}"),
    );
}

struct StandardFit {
    site: StandardSite,
    ctx: PosteriorContext,
    fit: MapFit,
    elapsed: Duration,
}

fn standard_fit(m: usize) -> StandardFit {
    let site = standard_site(1).unwrap();
    let model = Model::new(ModelConfig::default(), standard_model().unwrap().domain().clone()).unwrap();
    let ctx = PosteriorContext::new(model, site.training.clone(), m, 1).unwrap();
    let settings = MapSettings { n_starts: 1, seed: 1, ..MapSettings::default() };
    let start = Instant::now();
    let fit = fit_map(&ctx, &settings).unwrap();
    StandardFit { site, ctx, fit, elapsed: start.elapsed() }
}

fn standard_fit_50() -> &'static StandardFit {
    static FIT: OnceLock<StandardFit> = OnceLock::new();
    FIT.get_or_init(|| standard_fit(50))
}

#[test]
fn criterion_05_parameter_recovery() {
    let StandardFit { site, ctx, fit, elapsed } = standard_fit_50();
    let truth = site.site.theta.sigma_eps_sq;
    let eps_ratio = fit.theta.sigma_eps_sq / truth;

    let depths = regular_depths(0.25, 41.0, 0.05);
    let se: f64 = depths
        .iter()
        .map(|&h| (ctx.model().mean_at(&fit.omega, h).unwrap() - site.site.true_mean(h).unwrap()).powi(2))
        .sum();
    let rmse = (se / depths.len() as f64).sqrt();

    let coords = site.held_out.coordinates();
    let p = predict_measurements(ctx, &fit.theta, &fit.omega, &coords, &PredictSettings::default()).unwrap();
    let inside = p
        .mean
        .iter()
        .zip(&p.marginal_sd)
        .zip(site.held_out.values())
        .filter(|((m, s), z)| (z - *m).abs() <= 1.959963984540054 * *s)
        .count();
    let coverage = inside as f64 / coords.len() as f64;
    let pass = (0.8..=1.2).contains(&eps_ratio)
        && rmse < 0.1
        && (0.90..=0.99).contains(&coverage)
        && *elapsed < Duration::from_secs(30 * 60);
    report(
        5,
        pass,
        format!(
            "sigma_eps^2 {:.4} (truth {truth:.4}, ratio {eps_ratio:.3}), mean RMSE {rmse:.4}, held-out 95% coverage {:.1}%, \
             fit time {elapsed:.1?}",
            fit.theta.sigma_eps_sq,
            100.0 * coverage
        ),
    );
}

#[test]
fn criterion_06_spline_and_matern_identities() {
    let mut linearity = 0.0f64;
    for order in [1, 3, 5, 10] {
        let awu = AxialWarping::new(vec![0.7; order], 2.0, 12.0).unwrap();
        for i in 0..=200 {
            let u = 2.0 + 10.0 * i as f64 / 200.0;
            let exact = 0.7 * order as f64 * (u - 2.0) / 10.0;
            linearity = linearity.max((awu.warp(u).unwrap() - exact).abs());
            linearity = linearity.max((awu.derivative(u).unwrap() - 0.7 * order as f64 / 10.0).abs());
        }
    }
    let mut unity = 0.0f64;
    for (h_max, spacing, boundary) in [(41.0, 0.1, true), (15.0, 1.0, true), (7.25, 0.25, false)] {
        let basis = BSplineBasis::new(h_max, spacing, boundary).unwrap();
        for i in 0..=1000 {
            let h = h_max * i as f64 / 1000.0;
            unity = unity.max((basis.basis_row(h).unwrap().iter().sum::<f64>() - 1.0).abs());
        }
    }
    let closed = Matern::new(1.5).unwrap();
    let bessel = Matern::general(1.5).unwrap();
    let mut matern_err = 0.0f64;
    for i in 1..=400 {
        let d = 0.01 * i as f64;
        matern_err = matern_err.max((closed.value(d) - bessel.value(d)).abs());
    }
    let at_one = matern(1.5, 1.0).unwrap();
    let formula = (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp();
    matern_err = matern_err.max((at_one - formula).abs());
    report(
        6,
        linearity < 1e-12 && unity < 1e-12 && matern_err < 1e-10,
        format!("linearity {linearity:.1e}, partition of unity {unity:.1e}, Matern-3/2 vs Bessel {matern_err:.1e}"),
    );
}

/// `∫ (F(x) - 1{x ≥ y})² dx` for `N(mu, sigma²)` by composite Simpson on
/// each side of `y`.
fn crps_quadrature(mu: f64, sigma: f64, y: f64) -> f64 {
    let normal = Normal::new(mu, sigma).unwrap();
    let simpson = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| {
        let n = 200_000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
        }
        s * h / 3.0
    };
    let (lo, hi) = ((mu - 40.0 * sigma).min(y), (mu + 40.0 * sigma).max(y));
    simpson(lo, y, &|x| normal.cdf(x).powi(2)) + simpson(y, hi, &|x| normal.sf(x).powi(2))
}

#[test]
fn criterion_07_scoring_oracles() {
    let mut quad_err = 0.0f64;
    for &(mu, sigma, y) in &[(0.0, 1.0, 0.0), (1.3, 0.4, 2.1), (-2.0, 3.0, 5.5), (0.5, 0.05, 0.41), (0.0, 2.0, -7.0)] {
        quad_err = quad_err.max((crps_gaussian(mu, sigma, y).unwrap() - crps_quadrature(mu, sigma, y)).abs());
    }
    let dss0 = dss(0.0, 1.0, 0.0).unwrap();
    let width_err = (interval_score_95(-1.25, 2.5, 0.3).unwrap() - 3.75).abs();

    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let std = Normal::new(0.0, 1.0).unwrap();
    let samples: Vec<f64> =
        (0..n).map(|i| std.inverse_cdf((i as f64 + rng.gen::<f64>()) / n as f64)).collect();
    let mut emp_err = 0.0f64;
    for y in [0.0, 0.7, -1.9] {
        emp_err = emp_err.max((crps_empirical(&samples, y).unwrap() - crps_gaussian(0.0, 1.0, y).unwrap()).abs());
    }
    report(
        7,
        quad_err < 1e-8 && dss0 == 0.0 && width_err < 1e-12 && emp_err < 1e-3,
        format!(
            "closed form vs quadrature {quad_err:.1e}, DSS(0,1,0) = {dss0}, Int05 width error {width_err:.1e}, \
             empirical CRPS (10^6 samples) error {emp_err:.1e}"
        ),
    );
}

#[test]
fn criterion_08_cross_validation_ordering() {
    let site = cv_site(11).unwrap();
    let settings = CvSettings {
        m_fit: 30,
        m_predict: 60,
        seed: 1,
        map: MapSettings { n_starts: 2, seed: 1, ..MapSettings::default() },
        ..CvSettings::default()
    };
    let models: Vec<CvModel> = ["full", "linear", "binned"].iter().map(|m| CvModel::parse(m).unwrap()).collect();
    let report_cv = cross_validate(&site.dataset, &models, &settings, "synthetic").unwrap();
    let failed: usize = report_cv.models.iter().map(|m| m.failed.len()).sum();
    let crps_gw = report_cv.mean(Metric::Crps, "full").unwrap();
    let crps_lin = report_cv.mean(Metric::Crps, "linear").unwrap();
    let mse_gw = report_cv.mean(Metric::Mse, "full").unwrap();
    let mse_bin = report_cv.mean(Metric::Mse, "binned").unwrap();

    // White-noise variant: the predictive mean is the fitted profile.
    let (train, test) = site.split(&["C03"]).unwrap();
    let cfg = ModelConfig { variant: Variant::WhiteNoiseCv, ..ModelConfig::default() };
    let model = Model::new(cfg, site.model.domain().clone()).unwrap();
    let ctx = PosteriorContext::new(model, train, 30, 1).unwrap();
    let wn = fit_map(&ctx, &MapSettings { n_starts: 1, seed: 1, ..MapSettings::default() }).unwrap();
    let coords = test.coordinates();
    let p = predict_measurements(&ctx, &wn.theta, &wn.omega, &coords, &PredictSettings::default()).unwrap();
    let wn_exact = coords.iter().zip(&p.mean).all(|(c, m)| *m == ctx.model().mean_at(&wn.omega, c.h).unwrap());

    report(
        8,
        failed == 0 && crps_gw < crps_lin && mse_gw <= 1.05 * mse_bin && wn_exact,
        format!(
            "CRPS GeoWarp {crps_gw:.4} vs linear {crps_lin:.4}; MSE GeoWarp {mse_gw:.4} vs binned {mse_bin:.4} \
             (x1.05 = {:.4}); white-noise mean equals profile: {wn_exact}; failed folds {failed}",
            1.05 * mse_bin
        ),
    );
}

#[test]
fn criterion_09_nu_study() {
    let ds = nu_study_site(1.5, 30, 300, 7).unwrap();
    let result = nu_study(&ds, &NuStudySettings::default()).unwrap();
    let idx = result.nus.iter().position(|&nu| nu == 1.5).unwrap();
    let wins = result.wins[idx];
    let summary: Vec<String> = result.nus.iter().zip(&result.wins).map(|(nu, w)| format!("nu={nu}: {w}")).collect();
    report(9, wins * 10 >= 6 * 30, format!("nu = 3/2 best for {wins} of 30 columns ({})", summary.join(", ")));
}

/// Mean absolute difference over mean absolute reference value.
fn relative_difference(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    let den: f64 = b.iter().map(|y| y.abs()).sum();
    num / den
}

#[test]
fn criterion_10_parent_count_stability() {
    let reference = standard_fit_50();
    let coarse = standard_fit(24);
    let depths = regular_depths(0.25, 41.0, 0.05);
    let profiles = |f: &StandardFit| {
        let model = f.ctx.model();
        let warping = model.warping(&f.fit.theta).unwrap();
        let vertical = warping.axes.last().unwrap();
        let mean: Vec<f64> = depths.iter().map(|&h| model.mean_at(&f.fit.omega, h).unwrap()).collect();
        let sd: Vec<f64> =
            depths.iter().map(|&h| (0.5 * model.log_variance_at(&f.fit.theta, h).unwrap()).exp()).collect();
        let slope: Vec<f64> = depths.iter().map(|&h| vertical.derivative(h).unwrap()).collect();
        [mean, sd, slope]
    };
    let (a, b) = (profiles(&coarse), profiles(reference));
    let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| relative_difference(x, y)).collect();
    report(
        10,
        diffs.iter().all(|d| *d < 0.05),
        format!(
            "m = 24 vs m = 50: mean {:.2}%, sigma_delta {:.2}%, vertical warp derivative {:.2}%",
            100.0 * diffs[0],
            100.0 * diffs[1],
            100.0 * diffs[2]
        ),
    );
}

#[test]
fn criterion_11_determinism() {
    let site = cv_site(5).unwrap();
    let (train, test) = site.split(&["C04"]).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let model = Model::new(ModelConfig::default(), site.model.domain().clone()).unwrap();
            let ctx = PosteriorContext::new(model, train.clone(), 10, 2).unwrap();
            let map = MapSettings {
                n_starts: 3,
                seed: 4,
                optimizer: OptimizerSettings { max_iterations: 20, ..OptimizerSettings::default() },
                ..MapSettings::default()
            };
            let fit = fit_map(&ctx, &map).unwrap();
            let settings = PredictSettings { m: 20, seed: 3, n_samples: 5, ..PredictSettings::default() };
            let pred = predict(&ctx, &fit.theta, &fit.omega, &test.coordinates(), &settings).unwrap();
            let cv_settings = CvSettings { m_fit: 10, m_predict: 20, seed: 6, map, ..CvSettings::default() };
            let models: Vec<CvModel> =
                ["nowarpcv", "wncv", "linear", "binned"].iter().map(|m| CvModel::parse(m).unwrap()).collect();
            let cv = cross_validate(&site.dataset, &models, &cv_settings, "synthetic").unwrap();
            [
                geowarp::io::to_json_string(&fit).unwrap(),
                geowarp::io::to_json_string(&pred).unwrap(),
                geowarp::io::to_json_string(&cv).unwrap(),
            ]
        })
    };
    let first = run(1);
    let repeat = run(1);
    let threaded = run(3);
    let same = first == repeat && first == threaded;
    report(
        11,
        same,
        format!(
            "fit/predict/cv JSON ({} bytes) identical across two 1-thread runs and a 3-thread run: {same}",
            first.iter().map(String::len).sum::<usize>()
        ),
    );
}
