//! The proper scoring rules on a few forecasts, and the Welch test used to
//! mark the best models.

use geowarp::score::{crps_empirical, crps_gaussian, dss, dss2, interval_score_95, welch_one_sided, Z_975};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> geowarp::error::Result<()> {
    let y = 0.4;
    println!("{:>6} {:>6} {:>8} {:>8} {:>8}", "mu", "sigma", "CRPS", "Int05", "DSS");
    for (mu, sigma) in [(0.4, 0.1), (0.4, 0.5), (0.0, 0.5), (0.0, 0.1), (1.0, 2.0)] {
        println!(
            "{mu:>6.2} {sigma:>6.2} {:>8.4} {:>8.4} {:>8.4}",
            crps_gaussian(mu, sigma, y)?,
            interval_score_95(mu - Z_975 * sigma, mu + Z_975 * sigma, y)?,
            dss(mu, sigma, y)?
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let normal = Normal::new(0.0, 0.5).unwrap();
    for n in [10, 100, 1000, 100_000] {
        let x: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        println!("empirical CRPS with {n:>6} draws: {:.5}", crps_empirical(&x, y)?);
    }
    println!("closed form:                      {:.5}", crps_gaussian(0.0, 0.5, y)?);

    let cov = [[0.25, 0.2], [0.2, 0.25]];
    println!("bivariate DSS, correlated pair: {:.4}", dss2([0.0, 0.0], cov, [0.4, 0.3])?);
    println!("bivariate DSS, sign flip:       {:.4}", dss2([0.0, 0.0], cov, [0.4, -0.3])?);

    let a: Vec<f64> = (0..20).map(|i| 0.30 + 0.01 * ((i * 7) % 5) as f64).collect();
    let b: Vec<f64> = (0..20).map(|i| 0.34 + 0.01 * ((i * 3) % 5) as f64).collect();
    println!("Welch p-value that b scores worse than a: {:.2e}", welch_one_sided(&a, &b));
    Ok(())
}
