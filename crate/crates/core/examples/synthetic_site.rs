//! Simulates the standard synthetic site and writes it in the ingestion
//! CSV format.
//!
//!     cargo run --release --example synthetic_site -- [seed] [out_dir]

use std::path::PathBuf;

use geowarp::io::save_site_csv;
use geowarp::synth::standard_site;

fn main() -> geowarp::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed must be an integer"));
    let dir = args.next().map_or_else(std::env::temp_dir, PathBuf::from);

    let s = standard_site(seed)?;
    let site = &s.site;
    println!(
        "{} soundings, {} points, domain {:?} to {:?}",
        site.dataset.soundings().len(),
        site.dataset.n_points(),
        site.model.domain().lower,
        site.model.domain().upper
    );
    println!("sigma_eps^2 = {}, parameters: {}", site.theta.sigma_eps_sq, site.model.parameter_count());
    println!("{:>8} {:>10} {:>10}", "depth", "mean", "log sd");
    for h in [1.0, 5.0, 10.0, 13.7, 20.0, 27.3, 35.0, 40.0] {
        println!("{h:>8.1} {:>10.4} {:>10.4}", site.true_mean(h)?, 0.5 * site.model.log_variance_at(&site.theta, h)?);
    }

    let all = dir.join("standard_site.csv");
    let train = dir.join("standard_train.csv");
    let test = dir.join("standard_test.csv");
    save_site_csv(&site.dataset, &all)?;
    save_site_csv(&s.training, &train)?;
    save_site_csv(&s.held_out, &test)?;
    println!("wrote {}, {} and {}", all.display(), train.display(), test.display());
    Ok(())
}
