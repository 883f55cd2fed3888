//! MAP estimation and posterior sampling.

pub mod lbfgs;
pub mod map;
pub mod mcmc;

pub use lbfgs::{minimize, OptimResult, OptimizerSettings, StopReason};
pub use map::{data_informed_theta, fit_map, random_theta, MapFit, MapSettings, StartDiagnostics};
pub use mcmc::{fit_mcmc, run_adaptive_metropolis, split_rhat, Chain, LogDensity, McmcFit, McmcOutput, McmcSettings, PosteriorDraw};
