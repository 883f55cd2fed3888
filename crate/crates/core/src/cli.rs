//! Command-line interface behind the `geowarp` binary.
//!
//! Every command writes machine-readable JSON to `--out` and a short human
//! summary to standard output. All randomness derives from `--seed`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{GeoWarpError, Result};
use crate::infer::{fit_map, fit_mcmc, MapSettings, McmcSettings, OptimizerSettings};
use crate::io::{
    config_hash, load_config_json, load_fit_json, load_site_csv, save_json, save_site_csv, write_fields_csv,
    write_prediction_csv, FitMethod, FitRecord, DEFAULT_MIN_DEPTH,
};
use crate::model::{Domain, Model};
use crate::params::{MeanCoefficients, ParameterVector};
use crate::posterior::PosteriorContext;
use crate::predict::{
    predict_kind, simulate_posterior, FitDraws, Grid, PredictSettings, PredictionKind,
};
use crate::score::{cross_validate, score_holdout, CvModel, CvSettings, Metric, ScoreReport};
use crate::site::SiteDataset;
use crate::synth::{self, NuStudySettings};
use crate::vecchia::PredictionLayout;

#[derive(Debug, Parser)]
#[command(name = "geowarp", version, about = "Warped nonstationary Gaussian processes for CPT soundings")]
pub struct Cli {
    /// Worker threads [default: logical cores]. Results do not depend on it.
    #[arg(long, global = true, env = "GEOWARP_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Site CSV (`cpt_id,easting,northing,depth,qc_mpa` or `value_log`).
    #[arg(long)]
    data: PathBuf,
    /// Model configuration JSON; absent keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON output file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Measurements shallower than this (m) are dropped.
    #[arg(long, default_value_t = DEFAULT_MIN_DEPTH)]
    min_depth: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Map,
    Mcmc,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Process,
    Measurement,
}

impl From<Kind> for PredictionKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Process => PredictionKind::Process,
            Kind::Measurement => PredictionKind::Measurement,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Layout {
    Columnar,
    Gridded,
}

impl From<Layout> for PredictionLayout {
    fn from(l: Layout) -> Self {
        match l {
            Layout::Columnar => PredictionLayout::Columnar,
            Layout::Gridded => PredictionLayout::Gridded,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SynthKind {
    /// 13 soundings on a 100 m square, 0.25 to 41 m.
    Standard,
    /// 6 soundings on a 60 m square, 0.25 to 15.25 m.
    Cv,
    /// Independent 1-D columns with a Matérn residual of known smoothness.
    Nu,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model by MAP or MCMC.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Method::Map)]
        method: Method,
        /// MAP optimizer starts.
        #[arg(long, default_value_t = 10)]
        starts: usize,
        /// Maximum L-BFGS iterations per start.
        #[arg(long, default_value_t = 2000)]
        max_iter: usize,
        #[arg(long, default_value_t = 4)]
        chains: usize,
        /// MCMC iterations per chain, burn-in included.
        #[arg(long, default_value_t = 20_000)]
        iters: usize,
        /// MCMC burn-in [default: half the iterations].
        #[arg(long)]
        burnin: Option<usize>,
        #[arg(long, default_value_t = 10)]
        thin: usize,
        /// Vecchia parents per point.
        #[arg(long, default_value_t = 50)]
        parents: usize,
        /// Horizontal extent `x0,x1[,y0,y1]` of the model domain, so later
        /// predictions may reach beyond the soundings [default: their bounding box].
        #[arg(long)]
        domain: Option<String>,
    },
    /// Predictive mean and sd on a grid.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Fit JSON written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// `x0,x1,nx,[y0,y1,ny,]z0,z1,nz`.
        #[arg(long)]
        grid: String,
        /// Joint draws to include; with two or more the sd is their sample sd.
        #[arg(long, default_value_t = 0)]
        samples: usize,
        #[arg(long, default_value_t = 100)]
        parents: usize,
        #[arg(long, value_enum, default_value_t = Kind::Process)]
        kind: Kind,
        #[arg(long, value_enum, default_value_t = Layout::Columnar)]
        layout: Layout,
        /// Also write `easting,northing,depth,mean,sd` here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Posterior predictive fields on a grid.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        grid: String,
        /// Fields to draw from a MAP fit; MCMC fits draw one per retained sample.
        #[arg(long, default_value_t = 10)]
        draws: usize,
        #[arg(long, default_value_t = 100)]
        parents: usize,
        #[arg(long, value_enum, default_value_t = Kind::Process)]
        kind: Kind,
        #[arg(long, value_enum, default_value_t = Layout::Columnar)]
        layout: Layout,
        /// Also write `easting,northing,depth,draw,value` here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Leave-one-sounding-out cross-validation.
    Cv {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full,nowarp,cv,nowarpcv,vertcv,wncv,linear,binned")]
        models: String,
        #[arg(long, default_value_t = 10)]
        starts: usize,
        #[arg(long, default_value_t = 2000)]
        max_iter: usize,
        #[arg(long, default_value_t = 50)]
        parents: usize,
        #[arg(long, default_value_t = 100)]
        predict_parents: usize,
        #[arg(long, default_value_t = 0.1)]
        bin_width: f64,
        /// Site label in the score table [default: data file stem].
        #[arg(long)]
        site: Option<String>,
        /// Also write the score table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Simulate a synthetic site.
    Synth {
        #[arg(long, value_enum, default_value_t = SynthKind::Standard)]
        kind: SynthKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON record of the true parameters.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Site CSV with every sounding.
        #[arg(long)]
        csv: PathBuf,
        /// Training soundings only (standard site).
        #[arg(long)]
        train_csv: Option<PathBuf>,
        /// Held-out soundings only (standard site).
        #[arg(long)]
        test_csv: Option<PathBuf>,
        /// Smoothness of the `nu` columns.
        #[arg(long, default_value_t = 1.5)]
        nu: f64,
        #[arg(long, default_value_t = 30)]
        columns: usize,
        #[arg(long, default_value_t = 300)]
        depths: usize,
    },
    /// Per-sounding choice of the Matérn smoothness.
    NuStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "0.5,1.5,2.5,3.5")]
        nus: String,
        #[arg(long, default_value_t = 0.1)]
        bin_width: f64,
    },
    /// Score a fit against withheld soundings, with both depth-only baselines.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fit: PathBuf,
        /// Withheld soundings.
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 100)]
        parents: usize,
        #[arg(long, default_value_t = 0.1)]
        bin_width: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Fit { .. } => "fit",
            Command::Predict { .. } => "predict",
            Command::Simulate { .. } => "simulate",
            Command::Cv { .. } => "cv",
            Command::Synth { .. } => "synth",
            Command::NuStudy { .. } => "nu-study",
            Command::Score { .. } => "score",
        }
    }

    fn out(&self) -> Option<&Path> {
        match self {
            Command::Fit { common, .. }
            | Command::Predict { common, .. }
            | Command::Simulate { common, .. }
            | Command::Cv { common, .. }
            | Command::NuStudy { common, .. }
            | Command::Score { common, .. } => common.out.as_deref(),
            Command::Synth { out, .. } => out.as_deref(),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => load_config_json(p),
        None => Ok(ModelConfig::default()),
    }
}

fn write_out<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    match path {
        Some(p) => save_json(value, p),
        None => Ok(()),
    }
}

fn write_csv(path: Option<&Path>, f: impl FnOnce(std::fs::File) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => f(std::fs::File::create(p)?),
        None => Ok(()),
    }
}

/// Context for a saved fit, checking that the data lie in its domain.
fn fit_context(common: &Common, fit: &Path, parents: usize) -> Result<(FitRecord, PosteriorContext)> {
    let record = load_fit_json(fit)?;
    let data = load_site_csv(&common.data, common.min_depth)?;
    let ctx = PosteriorContext::new(record.model()?, data, parents, record.seed)?;
    Ok((record, ctx))
}

fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| GeoWarpError::config(format!("invalid number `{t}`"))))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_fit(
    common: &Common,
    method: Method,
    starts: usize,
    max_iter: usize,
    chains: usize,
    iters: usize,
    burnin: Option<usize>,
    thin: usize,
    parents: usize,
    extent: Option<&str>,
) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let data = load_site_csv(&common.data, common.min_depth)?;
    let model = match extent {
        None => Model::for_dataset(cfg, &data)?,
        Some(text) => {
            let cfg = cfg.with_dim(data.dim())?;
            let bounds = parse_list(text)?;
            if bounds.len() != 2 * data.dim() {
                return Err(GeoWarpError::config(format!(
                    "--domain needs {} numbers for {} horizontal axes",
                    2 * data.dim(),
                    data.dim()
                )));
            }
            let h_max = Domain::from_dataset(&data, &cfg)?.h_max();
            let mut lower: Vec<f64> = bounds.iter().step_by(2).copied().collect();
            let mut upper: Vec<f64> = bounds.iter().skip(1).step_by(2).copied().collect();
            lower.push(0.0);
            upper.push(h_max);
            Model::new(cfg, Domain::new(lower, upper)?)?
        }
    };
    let domain = model.domain().clone();
    let config = model.cfg().clone();
    let ctx = PosteriorContext::new(model, data, parents, common.seed)?;
    println!(
        "{} soundings, {} points, {} parameters, m = {parents}",
        ctx.dataset().soundings().len(),
        ctx.n(),
        ctx.model().parameter_count()
    );
    let (theta, chart, omega, map, mcmc): (ParameterVector, Vec<f64>, MeanCoefficients, _, _) = match method {
        Method::Map => {
            let s = MapSettings {
                n_starts: starts,
                seed: common.seed,
                optimizer: OptimizerSettings { max_iterations: max_iter, ..OptimizerSettings::default() },
                ..MapSettings::default()
            };
            let fit = fit_map(&ctx, &s)?;
            let start = &fit.starts[fit.selected_start];
            println!(
                "MAP log posterior {:.4} from start {} ({} iterations, {:?})",
                fit.log_posterior, fit.selected_start, start.iterations, start.reason
            );
            (fit.theta.clone(), fit.chart.clone(), fit.omega.clone(), Some(fit), None)
        }
        Method::Mcmc => {
            let s = McmcSettings {
                n_chains: chains,
                n_iterations: iters,
                n_burnin: burnin.unwrap_or(iters / 2),
                seed: common.seed,
                thin,
                ..McmcSettings::default()
            };
            let fit = fit_mcmc(&ctx, &s, None)?;
            let scores: Vec<f64> =
                fit.draws.iter().map(|d| ctx.chart_value(&d.chart, true).unwrap_or(f64::NEG_INFINITY)).collect();
            let best = (0..scores.len())
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
                .ok_or_else(|| GeoWarpError::Inference("MCMC retained no draws".into()))?;
            let max_rhat = fit.rhat.iter().cloned().fold(f64::NAN, f64::max);
            println!(
                "{} draws, acceptance {:?}, max split-R\u{302} {:.3}",
                fit.draws.len(),
                fit.acceptance_rates.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                max_rhat
            );
            for w in &fit.warnings {
                println!("warning: {w}");
            }
            let d = &fit.draws[best];
            (d.theta.clone(), d.chart.clone(), d.omega.clone(), None, Some(fit))
        }
    };
    println!("sigma_eps^2 = {:.5}", theta.sigma_eps_sq);
    let record = FitRecord {
        method: match method {
            Method::Map => FitMethod::Map,
            Method::Mcmc => FitMethod::Mcmc,
        },
        config_hash: config_hash(&config),
        config,
        domain,
        seed: common.seed,
        m: parents,
        theta,
        chart,
        omega,
        map,
        mcmc,
    };
    write_out(common.out.as_deref(), &record)
}

fn run_synth(
    kind: SynthKind,
    seed: u64,
    out: Option<&Path>,
    csv: &Path,
    train_csv: Option<&Path>,
    test_csv: Option<&Path>,
    nu: f64,
    columns: usize,
    depths: usize,
) -> Result<()> {
    #[derive(Serialize)]
    struct Truth<'a> {
        kind: &'static str,
        seed: u64,
        config: &'a ModelConfig,
        domain: &'a Domain,
        theta: &'a ParameterVector,
        omega: &'a MeanCoefficients,
        held_out: Vec<String>,
    }
    #[derive(Serialize)]
    struct NuTruth {
        kind: &'static str,
        seed: u64,
        nu: f64,
        tau1_sq: f64,
        tau2_sq: f64,
        upsilon: f64,
        columns: usize,
        depths: usize,
    }
    let write_split = |site: &SiteDataset, held: &[String]| -> Result<()> {
        let keep = |want_held: bool| {
            let soundings = site
                .soundings()
                .iter()
                .filter(|s| held.contains(&s.id) == want_held)
                .cloned()
                .collect();
            SiteDataset::new(soundings)
        };
        if let Some(p) = train_csv {
            save_site_csv(&keep(false)?, p)?;
        }
        if let Some(p) = test_csv {
            save_site_csv(&keep(true)?, p)?;
        }
        Ok(())
    };
    match kind {
        SynthKind::Standard | SynthKind::Cv => {
            let (site, name) = match kind {
                SynthKind::Standard => (synth::standard_site(seed)?.site, "standard"),
                _ => (synth::cv_site(seed)?, "cv"),
            };
            let held: Vec<String> = match kind {
                SynthKind::Standard => (1..=synth::STANDARD_HELD_OUT.len()).map(|i| format!("H{i:02}")).collect(),
                _ => Vec::new(),
            };
            save_site_csv(&site.dataset, csv)?;
            write_split(&site.dataset, &held)?;
            println!(
                "{name} site: {} soundings, {} points, sigma_eps^2 = {}",
                site.dataset.soundings().len(),
                site.dataset.n_points(),
                site.theta.sigma_eps_sq
            );
            write_out(
                out,
                &Truth {
                    kind: name,
                    seed,
                    config: site.model.cfg(),
                    domain: site.model.domain(),
                    theta: &site.theta,
                    omega: &site.omega,
                    held_out: held,
                },
            )
        }
        SynthKind::Nu => {
            let ds = synth::nu_study_site(nu, columns, depths, seed)?;
            save_site_csv(&ds, csv)?;
            write_split(&ds, &[])?;
            println!("{columns} columns of {depths} depths at nu = {nu}");
            write_out(
                out,
                &NuTruth {
                    kind: "nu",
                    seed,
                    nu,
                    tau1_sq: synth::NU_STUDY_TAU1_SQ,
                    tau2_sq: synth::NU_STUDY_TAU2_SQ,
                    upsilon: synth::NU_STUDY_UPSILON,
                    columns,
                    depths,
                },
            )
        }
    }
}

fn print_report(report: &ScoreReport) {
    println!("{:<10} {:>10} {:>10} {:>10} {:>10}", "model", "MSE", "CRPS", "Int05", "DSS");
    for m in &report.models {
        let cell = |metric: Metric| match report.mean(metric, &m.model) {
            Some(v) => format!("{v:>10.4}"),
            None => format!("{:>10}", "-"),
        };
        println!("{:<10} {} {} {} {}", m.model, cell(Metric::Mse), cell(Metric::Crps), cell(Metric::Int05), cell(Metric::Dss));
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit { common, method, starts, max_iter, chains, iters, burnin, thin, parents, domain } => {
            run_fit(&common, method, starts, max_iter, chains, iters, burnin, thin, parents, domain.as_deref())
        }
        Command::Predict { common, fit, grid, samples, parents, kind, layout, csv } => {
            let (record, ctx) = fit_context(&common, &fit, parents)?;
            let coords = Grid::parse(&grid)?.coordinates();
            let s = PredictSettings { m: parents, seed: common.seed, n_samples: samples, layout: layout.into() };
            let p = predict_kind(&ctx, &record.theta, &record.omega, &coords, &s, kind.into())?;
            let max_sd = p.marginal_sd.iter().cloned().fold(0.0, f64::max);
            println!("{} points, largest predictive sd {max_sd:.4}", coords.len());
            write_csv(csv.as_deref(), |f| write_prediction_csv(&p, f))?;
            write_out(common.out.as_deref(), &p)
        }
        Command::Simulate { common, fit, grid, draws, parents, kind, layout, csv } => {
            let (record, ctx) = fit_context(&common, &fit, parents)?;
            let coords = Grid::parse(&grid)?.coordinates();
            let s = PredictSettings { m: parents, seed: common.seed, n_samples: 0, layout: layout.into() };
            let source = match (&record.mcmc, &record.map) {
                (Some(m), _) => FitDraws::Mcmc(m),
                (None, Some(m)) => FitDraws::Map { fit: m, n_draws: draws },
                (None, None) => return Err(GeoWarpError::Data("fit file holds neither a MAP nor an MCMC fit".into())),
            };
            let fields = simulate_posterior(&ctx, source, &coords, &s, kind.into())?;
            println!("{} fields of {} points", fields.draws.len(), coords.len());
            write_csv(csv.as_deref(), |f| write_fields_csv(&fields, f))?;
            write_out(common.out.as_deref(), &fields)
        }
        Command::Cv { common, models, starts, max_iter, parents, predict_parents, bin_width, site, csv } => {
            let config = load_config(common.config.as_deref())?;
            let data = load_site_csv(&common.data, common.min_depth)?;
            let models: Vec<CvModel> = models.split(',').map(CvModel::parse).collect::<Result<_>>()?;
            let s = CvSettings {
                config,
                m_fit: parents,
                m_predict: predict_parents,
                seed: common.seed,
                map: MapSettings {
                    n_starts: starts,
                    seed: common.seed,
                    optimizer: OptimizerSettings { max_iterations: max_iter, ..OptimizerSettings::default() },
                    ..MapSettings::default()
                },
                bin_width,
            };
            let site = site.unwrap_or_else(|| {
                common.data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "site".into())
            });
            let report = cross_validate(&data, &models, &s, &site)?;
            print_report(&report);
            for m in &report.models {
                for f in &m.failed {
                    println!("{} failed on {}: {}", m.model, f.id, f.error);
                }
            }
            write_csv(csv.as_deref(), |mut f| Ok(std::io::Write::write_all(&mut f, report.to_csv().as_bytes())?))?;
            write_out(common.out.as_deref(), &report)
        }
        Command::Synth { kind, seed, out, csv, train_csv, test_csv, nu, columns, depths } => run_synth(
            kind,
            seed,
            out.as_deref(),
            &csv,
            train_csv.as_deref(),
            test_csv.as_deref(),
            nu,
            columns,
            depths,
        ),
        Command::NuStudy { common, nus, bin_width } => {
            let data = load_site_csv(&common.data, common.min_depth)?;
            let s = NuStudySettings { nus: parse_list(&nus)?, bin_width, ..NuStudySettings::default() };
            let result = synth::nu_study(&data, &s)?;
            for (nu, w) in result.nus.iter().zip(&result.wins) {
                println!("nu = {nu}: {w} of {} soundings", result.soundings.len());
            }
            write_out(common.out.as_deref(), &result)
        }
        Command::Score { common, fit, test, parents, bin_width, csv } => {
            let (record, ctx) = fit_context(&common, &fit, parents)?;
            let test_data = load_site_csv(&test, common.min_depth)?;
            let s = PredictSettings { m: parents, seed: common.seed, ..PredictSettings::default() };
            let models = score_holdout(&ctx, &record.theta, &record.omega, &test_data, &s, bin_width)?;
            let name = test.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "test".into());
            let report = ScoreReport::new(&name, models);
            print_report(&report);
            write_csv(csv.as_deref(), |mut f| Ok(std::io::Write::write_all(&mut f, report.to_csv().as_bytes())?))?;
            write_out(common.out.as_deref(), &report)
        }
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code. Usage errors exit with 2, runtime errors with 1 after
/// printing the cause and a JSON error record.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let name = cli.command.name();
    let out = cli.command.out().map(Path::to_path_buf);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| execute(cli)),
        Err(e) => Err(GeoWarpError::config(format!("thread pool: {e}"))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let record = serde_json::json!({ "error": { "command": name, "message": e.to_string() } });
            eprintln!("{record}");
            if let Some(p) = out {
                let _ = std::fs::write(p, format!("{record:#}\n"));
            }
            1
        }
    }
}
