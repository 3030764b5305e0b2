use super::{BatchFeature, EngineError};
use crate::model::TableMeta;

/// Lookups of one feature destined for one row partition, with indices
/// rewritten to partition-local rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutedPartition {
    pub partition_index: u32,
    pub lengths: Vec<u32>,
    pub indices: Vec<u32>,
}

/// Route by row modulus: row `r` lives in partition `r % P` as local row
/// `r / P`. Every partition gets a lengths array with one entry per
/// instance, so per-instance boundaries survive the split.
pub fn route_indices(
    table: &TableMeta,
    partition_count: u32,
    feature: &BatchFeature,
) -> Result<Vec<RoutedPartition>, EngineError> {
    let p = partition_count.max(1);
    let n_inst = feature.instances();
    let mut out: Vec<RoutedPartition> = (0..p)
        .map(|i| RoutedPartition { partition_index: i, lengths: vec![0; n_inst], indices: Vec::new() })
        .collect();
    for (inst, slice) in feature.per_instance().enumerate() {
        for &ix in slice {
            if ix as u64 >= table.num_rows {
                return Err(EngineError::IndexOutOfRange {
                    table_id: table.table_id,
                    index: ix as u64,
                    num_rows: table.num_rows,
                });
            }
            let part = &mut out[(ix % p) as usize];
            part.lengths[inst] += 1;
            part.indices.push(ix / p);
        }
    }
    Ok(out)
}
