pub mod bspline;
pub mod cli;
pub mod config;
pub mod cov;
pub mod error;
pub mod infer;
pub mod io;
pub mod model;
pub mod params;
pub mod posterior;
pub mod predict;
pub mod prior;
pub mod score;
pub mod site;
pub mod special;
pub mod synth;
pub mod vecchia;
pub mod warp;
