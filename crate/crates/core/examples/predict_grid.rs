//! MAP fit on the small synthetic site, then the predictive mean and sd on a
//! vertical section between two soundings.

use geowarp::config::{ModelConfig, Variant};
use geowarp::infer::{fit_map, MapSettings, OptimizerSettings};
use geowarp::model::Model;
use geowarp::posterior::PosteriorContext;
use geowarp::predict::{predict, Grid, PredictSettings};
use geowarp::synth::cv_site;

fn main() -> geowarp::error::Result<()> {
    env_logger::init();
    let site = cv_site(4)?;
    let cfg = ModelConfig { variant: Variant::NoWarpCv, ..ModelConfig::default() };
    let model = Model::for_dataset(cfg, &site.dataset)?;
    let ctx = PosteriorContext::new(model, site.dataset.clone(), 30, 1)?;
    let settings = MapSettings {
        n_starts: 1,
        optimizer: OptimizerSettings { max_iterations: 300, ..OptimizerSettings::default() },
        ..MapSettings::default()
    };
    let fit = fit_map(&ctx, &settings)?;
    println!("MAP log posterior {:.3}, sigma_eps^2 = {:.4}", fit.log_posterior, fit.theta.sigma_eps_sq);

    // Section along northing = 30 from easting 4 to 57, every 0.5 m of depth.
    let grid = Grid::parse("4,57,12,30,30,1,0.5,15,30")?;
    let coords = grid.coordinates();
    let p = predict(&ctx, &fit.theta, &fit.omega, &coords, &PredictSettings { m: 60, ..PredictSettings::default() })?;
    let nz = 30;
    println!("predictive sd (rows: depth, columns: easting)");
    for k in (0..nz).step_by(3) {
        let row: Vec<String> = (0..12).map(|i| format!("{:.2}", p.marginal_sd[i * nz + k])).collect();
        println!("{:>5.1} m  {}", coords[k].h, row.join(" "));
    }
    Ok(())
}
