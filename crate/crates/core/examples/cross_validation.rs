//! Leave-one-sounding-out comparison of GeoWarp variants with the depth-only
//! baselines on the small nonstationary synthetic site.
//!
//!     cargo run --release --example cross_validation -- [models]
//!
//! `models` is a comma list such as `full,wncv,linear,binned`.

use geowarp::infer::{MapSettings, OptimizerSettings};
use geowarp::score::{cross_validate, CvModel, CvSettings, Metric};
use geowarp::synth::cv_site;

fn main() -> geowarp::error::Result<()> {
    env_logger::init();
    let models = std::env::args().nth(1).unwrap_or_else(|| "nowarpcv,wncv,linear,binned".into());
    let models: Vec<CvModel> = models.split(',').map(CvModel::parse).collect::<Result<_, _>>()?;
    let site = cv_site(11)?;
    let settings = CvSettings {
        m_fit: 30,
        m_predict: 60,
        seed: 1,
        map: MapSettings {
            n_starts: 2,
            seed: 1,
            optimizer: OptimizerSettings { max_iterations: 300, ..OptimizerSettings::default() },
            ..MapSettings::default()
        },
        ..CvSettings::default()
    };
    let report = cross_validate(&site.dataset, &models, &settings, "synthetic")?;
    println!("{:<10} {:>9} {:>9} {:>9} {:>9}", "model", "MSE", "CRPS", "Int05", "DSS");
    for m in &report.models {
        let cell = |metric| report.mean(metric, &m.model).map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<10} {:>9} {:>9} {:>9} {:>9}",
            m.model,
            cell(Metric::Mse),
            cell(Metric::Crps),
            cell(Metric::Int05),
            cell(Metric::Dss)
        );
    }
    print!("{}", report.to_csv());
    Ok(())
}
