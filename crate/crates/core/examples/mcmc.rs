//! Adaptive random-walk Metropolis on a small site: acceptance rates,
//! split-R̂ and posterior summaries of the noise variance.
//!
//!     cargo run --release --example mcmc -- [iterations]

use geowarp::config::{ModelConfig, Variant};
use geowarp::infer::{fit_mcmc, McmcSettings};
use geowarp::model::Model;
use geowarp::posterior::PosteriorContext;
use geowarp::site::SiteDataset;
use geowarp::synth::cv_site;

fn main() -> geowarp::error::Result<()> {
    env_logger::init();
    let iterations: usize = std::env::args().nth(1).map_or(4000, |s| s.parse().expect("integer"));
    let site = cv_site(2)?;
    // Three soundings keep each evaluation cheap.
    let ds = SiteDataset::new(site.dataset.soundings()[..3].to_vec())?;
    let cfg = ModelConfig { variant: Variant::NoWarpCv, ..ModelConfig::default() };
    let model = Model::for_dataset(cfg, &ds)?;
    let ctx = PosteriorContext::new(model, ds, 20, 1)?;
    let settings = McmcSettings {
        n_chains: 2,
        n_iterations: iterations,
        n_burnin: iterations / 2,
        thin: 5,
        seed: 3,
        ..McmcSettings::default()
    };
    let fit = fit_mcmc(&ctx, &settings, None)?;
    println!("{} retained draws, acceptance rates {:?}", fit.draws.len(), fit.acceptance_rates);
    let worst = fit.rhat.iter().cloned().fold(0.0, f64::max);
    println!("largest split-R-hat {worst:.3} over {} coordinates", fit.rhat.len());
    for w in &fit.warnings {
        println!("warning: {w}");
    }
    let mut s: Vec<f64> = fit.draws.iter().map(|d| d.theta.sigma_eps_sq).collect();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| s[((p * (s.len() - 1) as f64).round()) as usize];
    println!(
        "sigma_eps^2: median {:.4}, 90% interval [{:.4}, {:.4}], truth {}",
        q(0.5),
        q(0.05),
        q(0.95),
        site.theta.sigma_eps_sq
    );
    Ok(())
}
