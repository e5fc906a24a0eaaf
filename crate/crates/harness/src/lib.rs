//! Training loops, experiment sweeps and report generation.

pub mod config;
pub mod criteria;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod sweeps;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] sesc::Error),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("plot: {0}")]
    Plot(String),
    #[error("check failed: {0}")]
    Check(String),
}
