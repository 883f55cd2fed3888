//! MAP fit of the standard synthetic site and comparison with the truth.

use std::time::Instant;

use geowarp::config::ModelConfig;
use geowarp::infer::{fit_map, MapSettings};
use geowarp::model::Model;
use geowarp::posterior::PosteriorContext;
use geowarp::synth::standard_site;

fn main() -> geowarp::error::Result<()> {
    env_logger::init();
    let start = Instant::now();
    let std_site = standard_site(1)?;
    println!("simulated {} points in {:.1?}", std_site.site.dataset.n_points(), start.elapsed());

    let model = Model::for_dataset(ModelConfig::default(), &std_site.training)?;
    let ctx = PosteriorContext::new(model, std_site.training.clone(), 50, 1)?;
    let t = Instant::now();
    let theta0 = geowarp::infer::data_informed_theta(ctx.model(), ctx.dataset());
    let x0 = ctx.model().encode(&theta0)?;
    let (v, _) = ctx.chart_value_and_gradient(&x0, false)?;
    println!("one value+gradient evaluation: {:.2?} (log posterior {v:.2})", t.elapsed());

    let settings = MapSettings { n_starts: 1, seed: 1, ..MapSettings::default() };
    let t = Instant::now();
    let fit = fit_map(&ctx, &settings)?;
    let s = &fit.starts[fit.selected_start];
    println!(
        "MAP in {:.1?}: {} iterations, {} evaluations, |g| = {:.2e}, {:?}",
        t.elapsed(),
        s.iterations,
        s.evaluations,
        s.grad_norm,
        s.reason
    );
    println!(
        "sigma_eps^2: fitted {:.4}, truth {:.4}",
        fit.theta.sigma_eps_sq, std_site.site.theta.sigma_eps_sq
    );
    let mut se = 0.0;
    let depths = geowarp::synth::regular_depths(0.25, 41.0, 0.05);
    for &h in &depths {
        se += (ctx.model().mean_at(&fit.omega, h)? - std_site.site.true_mean(h)?).powi(2);
    }
    println!("mean-profile RMSE: {:.4}", (se / depths.len() as f64).sqrt());
    Ok(())
}
