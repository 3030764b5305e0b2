//! Offline analysis of merged traces and run logs.

mod attribution;
mod compare;
mod operators;

pub use attribution::{
    attribute_request, attribute_run, cpu_by_shard, AttributionReport, BoundingOp, LayerStack, RequestAttribution,
    STACK_LAYERS,
};
pub use compare::{compare_runs, write_stack_csv, OverheadReport, RunSummary, PERCENTILES};
pub use operators::{operator_stats, write_operator_csv, OperatorStats};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("percentile of an empty set")]
    EmptyInput,
    #[error("percentile {0} is outside (0, 100]")]
    BadPercentile(f64),
    #[error("malformed trace for request {request_id}: {message}")]
    MalformedTrace { request_id: u64, message: String },
    #[error("runs are not comparable: {0}")]
    WorkloadMismatch(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Nearest-rank percentile: the value at 1-based rank ⌈p/100 · n⌉ of the
/// sorted input.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, AnalyzeError> {
    if values.is_empty() {
        return Err(AnalyzeError::EmptyInput);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(AnalyzeError::BadPercentile(p));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (p * v.len() as f64 / 100.0).ceil() as usize;
    Ok(v[rank.clamp(1, v.len()) - 1])
}

/// P50, P90 and P99 in one pass over a sorted copy.
pub fn p50_p90_p99(values: &[f64]) -> Result<[f64; 3], AnalyzeError> {
    Ok([percentile(values, 50.0)?, percentile(values, 90.0)?, percentile(values, 99.0)?])
}

/// Time a request spent on the wire: the wait seen at the main shard minus
/// the service time seen at the sparse shard. Returns the floored estimate
/// and whether the raw difference was negative.
pub fn network_latency(wait_ns: u64, remote_e2e_ns: u64) -> (u64, bool) {
    match wait_ns.checked_sub(remote_e2e_ns) {
        Some(d) => (d, false),
        None => (0, true),
    }
}
