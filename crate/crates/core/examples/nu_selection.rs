//! Compares Matérn smoothness values per sounding on columns simulated at
//! `ν = 3/2`.

use geowarp::synth::{nu_study, nu_study_site, NuStudySettings};

fn main() -> geowarp::error::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let ds = nu_study_site(1.5, 30, 300, seed)?;
    let result = nu_study(&ds, &NuStudySettings::default())?;
    for s in &result.soundings {
        let ll: Vec<String> = s.fits.iter().map(|f| format!("{:10.2}", f.log_likelihood)).collect();
        println!("{}  {}", s.id, ll.join(" "));
    }
    for (nu, wins) in result.nus.iter().zip(&result.wins) {
        println!("nu = {nu}: best for {wins} of {} soundings", result.soundings.len());
    }
    Ok(())
}
