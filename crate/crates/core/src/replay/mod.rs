//! Synthetic workloads and the load driver.

mod runlog;
mod runner;
mod workload;

pub use runlog::{Provenance, RunLog, RunLogEntry};
pub use runner::{replay, ReplayOptions};
pub use workload::{
    generate_requests, CountDist, LookupSpec, ReplayMode, TableOverride, ValueDist, WorkloadProfile,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("workload profile does not fit the model: {0}")]
    ProfileMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("run log: {0}")]
    RunLog(String),
}
