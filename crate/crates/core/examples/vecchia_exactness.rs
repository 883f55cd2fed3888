//! Vecchia log-density against the dense Gaussian log-density as the number
//! of parents grows; with every predecessor as a parent they agree exactly.

use geowarp::config::ModelConfig;
use geowarp::cov::{data_covariance, CovarianceModel};
use geowarp::model::Model;
use geowarp::synth::{generate_site, regular_depths, SiteLayout, TruthSpec};
use geowarp::vecchia::{build_plan, factorize};
use nalgebra::DVector;

fn main() -> geowarp::error::Result<()> {
    let locations = vec![vec![5.0, 5.0], vec![30.0, 12.0], vec![18.0, 40.0]];
    let layout = SiteLayout::regular("V", &locations, &regular_depths(0.3, 12.0, 0.2));
    let model = Model::new(
        ModelConfig::default(),
        geowarp::model::Domain::new(vec![0.0, 0.0, 0.0], vec![40.0, 40.0, 13.0])?,
    )?;
    let (theta, omega) = TruthSpec::cross_validation().truth(&model)?;
    let site = generate_site(&model, &theta, &omega, &layout, 3)?;
    let ds = &site.dataset;
    let coords = ds.coordinates();
    let n = coords.len();

    let r: Vec<f64> = coords.iter().zip(ds.values()).map(|(c, z)| z - site.true_mean(c.h).unwrap()).collect();
    let sigma = data_covariance(&model, &theta, &coords)?;
    let chol = sigma.clone().cholesky().expect("covariance is positive definite");
    let rv = DVector::from_vec(r.clone());
    let quad = rv.dot(&chol.solve(&rv));
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let dense = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad);
    println!("{n} points, dense log-density {dense:.10}");

    let prepared = CovarianceModel::new(&model, &theta)?.prepare_coords(&coords)?;
    let cov = |i: usize, j: usize| prepared.covariance(i, j) + if i == j { theta.sigma_eps_sq } else { 0.0 };
    let full = n.next_multiple_of(2);
    for m in [4, 10, 20, 50, full] {
        let plan = build_plan(ds, m, 0)?;
        let v = factorize(&plan, cov)?.log_density(&r)?;
        println!("m = {m:>3}: {v:.10}  (difference {:+.2e})", v - dense);
    }
    Ok(())
}
