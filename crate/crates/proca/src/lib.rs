//! Files and processes around `proca-core`: dataset directories, checkpoints,
//! versioned configs, run directories, reports, ablation sweeps and the CLI.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod plot;
pub mod report;
pub mod rundir;

pub use error::{AppError, AppResult};
