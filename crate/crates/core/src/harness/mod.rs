//! Experiment runner: configuration, training loop, metrics, result files
//! and hyperparameter search.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::DataError;
use crate::nn::NnError;
use crate::scenario::ScenarioError;
use crate::stain::StainError;
use crate::strategy::StrategyError;

pub mod config;
pub mod grid;
pub mod metrics;
pub mod output;
pub mod train;

pub use config::{
    AugmentConfig, DataConfig, DataSource, ModelConfig, OutputConfig, RunConfig, ScenarioConfig, TrainConfig,
    SCHEMA_VERSION,
};
pub use grid::{apply_overrides, enumerate_grid, grid_search, GridResult, GridRow};
pub use metrics::{aggregate, compute_metrics, AccMatrix, Aggregate, MeanStd, Metrics};
pub use output::{read_result, render_report, result_json, round5, write_manifest, write_results};
pub use train::{
    build_stream, evaluate, load_sources, run_experiment, run_seed, run_with_sources, ExperienceLog, RunHooks,
    RunResult, SeedRun, Sources,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Stain(#[from] StainError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("seed {seed}, experience {experience}{}: {source}", step.map(|s| format!(", step {s}")).unwrap_or_default())]
    Training {
        seed: u64,
        experience: usize,
        step: Option<usize>,
        #[source]
        source: StrategyError,
    },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Caps the global rayon pool at `HISTOCL_THREADS` workers when the
/// variable is set. Only the first call in a process has an effect.
pub fn configure_threads() -> Result<(), HarnessError> {
    let Ok(text) = std::env::var("HISTOCL_THREADS") else {
        return Ok(());
    };
    let n: usize = text
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| HarnessError::Config(format!("HISTOCL_THREADS={text} is not a positive integer")))?;
    // a pool that already exists is kept
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
