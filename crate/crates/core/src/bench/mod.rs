//! Experiment harness: built-in problems, run configs, reports and exports.

use std::path::PathBuf;

use thiserror::Error;

use crate::trainer::TrainError;

pub mod config;
pub mod problems;
pub mod run;
pub mod scaling;
pub mod slices;
pub mod sweep;

pub use config::{ProblemSpec, ResolvedRun, RunConfig, SliceSpec, TrainOverrides};
pub use run::{run, RunOutcome, RunReport, RunStatus};
pub use scaling::{scaling_bench, DimTiming, ScalingReport, ScalingSpec};
pub use slices::{export_slices, SliceSummary};
pub use sweep::{alpha_sweep, AlphaChoice, SweepReport, SweepRow};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// The run stopped on a non-finite value; the report has been written.
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error(transparent)]
    Train(TrainError),
}

impl BenchError {
    /// Process exit code: 2 for configuration errors, 3 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::Numerical(_) => 3,
            BenchError::Train(TrainError::NumericalAbort { .. }) => 3,
            BenchError::Train(TrainError::Config(_)) => 2,
            BenchError::Io { .. } | BenchError::Train(_) => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| BenchError::Io { path, source }
    }
}

impl From<TrainError> for BenchError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => BenchError::Config(vec![m]),
            e => BenchError::Train(e),
        }
    }
}

pub(crate) fn write_file(path: &std::path::Path, contents: impl AsRef<[u8]>) -> Result<(), BenchError> {
    std::fs::write(path, contents).map_err(BenchError::io(path))
}

pub(crate) fn create_dir(path: &std::path::Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(path).map_err(BenchError::io(path))
}
