use std::collections::BTreeMap;
use std::io::Write;

use super::{percentile, AnalyzeError};
use crate::replay::Provenance;
use crate::trace::{Layer, RequestTrace, ShardTag};

/// Latency distribution of one operator kind on one shard.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorStats {
    pub shard: ShardTag,
    pub layer: Layer,
    pub name: String,
    pub count: usize,
    pub mean_ns: f64,
    pub p50_ns: f64,
    pub p90_ns: f64,
    pub p99_ns: f64,
}

/// Operator spans grouped by shard, layer and name, sorted by that key.
pub fn operator_stats(traces: &[RequestTrace]) -> Vec<OperatorStats> {
    let mut groups: BTreeMap<(ShardTag, Layer, String), Vec<f64>> = BTreeMap::new();
    for e in traces.iter().flat_map(|t| &t.events) {
        if matches!(e.layer, Layer::DenseOp | Layer::SparseOp) {
            groups.entry((e.shard, e.layer, e.name.to_string())).or_default().push(e.dur_ns as f64);
        }
    }
    groups
        .into_iter()
        .map(|((shard, layer, name), v)| {
            let p = |q| percentile(&v, q).expect("groups are nonempty");
            OperatorStats {
                shard,
                layer,
                name,
                count: v.len(),
                mean_ns: v.iter().sum::<f64>() / v.len() as f64,
                p50_ns: p(50.0),
                p90_ns: p(90.0),
                p99_ns: p(99.0),
            }
        })
        .collect()
}

pub fn write_operator_csv(w: impl Write, prov: &Provenance, stats: &[OperatorStats]) -> Result<(), AnalyzeError> {
    let mut w = std::io::BufWriter::new(w);
    prov.write_comments(&mut w)?;
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["shard", "layer", "name", "count", "mean_ns", "p50_ns", "p90_ns", "p99_ns"])?;
    for s in stats {
        c.write_record([
            s.shard.to_string(),
            s.layer.to_string(),
            s.name.clone(),
            s.count.to_string(),
            format!("{:.0}", s.mean_ns),
            format!("{:.0}", s.p50_ns),
            format!("{:.0}", s.p90_ns),
            format!("{:.0}", s.p99_ns),
        ])?;
    }
    c.flush()?;
    Ok(())
}
