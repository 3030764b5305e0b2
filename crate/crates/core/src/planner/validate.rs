use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::{build_rpc_ops, ShardId, ShardPlan, Strategy};
use crate::model::{ModelHeader, NetId, Pooling, TableId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnknownTable { table: TableId },
    ShardOutOfRange { table: TableId, shard: ShardId },
    InconsistentPartitionCount { table: TableId },
    PartitionIndexOutOfRange { table: TableId, partition: u32 },
    DuplicateAssignment { table: TableId, partition: u32 },
    CoverageGap { table: TableId, missing: Vec<u32> },
    SplitConcatTable { table: TableId },
    SingularWithAssignments,
    MixedNets { shard: ShardId, nets: Vec<NetId> },
    BinLimitExceeded { shard: ShardId, bytes: u64, limit: u64 },
    /// RPC ops disagree with the assignments; an op serving partitions its
    /// shard does not host would need shard-to-shard forwarding.
    RpcOpMismatch { detail: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownTable { table } => write!(f, "assignment references unknown table {table}"),
            Violation::ShardOutOfRange { table, shard } => write!(f, "table {table} assigned to nonexistent shard {shard}"),
            Violation::InconsistentPartitionCount { table } => write!(f, "table {table} has inconsistent partition counts"),
            Violation::PartitionIndexOutOfRange { table, partition } => {
                write!(f, "table {table} partition {partition} is out of range")
            }
            Violation::DuplicateAssignment { table, partition } => {
                write!(f, "table {table} partition {partition} assigned more than once")
            }
            Violation::CoverageGap { table, missing } => write!(f, "table {table} rows uncovered, missing partitions {missing:?}"),
            Violation::SplitConcatTable { table } => write!(f, "concat table {table} is split"),
            Violation::SingularWithAssignments => write!(f, "singular plan carries assignments"),
            Violation::MixedNets { shard, nets } => write!(f, "shard {shard} mixes nets {nets:?}"),
            Violation::BinLimitExceeded { shard, bytes, limit } => {
                write!(f, "shard {shard} holds {bytes} bytes over the bin limit {limit}")
            }
            Violation::RpcOpMismatch { detail } => write!(f, "rpc ops inconsistent: {detail}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Structural checks on a plan: full row coverage, consistent modulus
/// partitioning, main-to-sparse-only RPC topology and, for NSBP, net purity
/// and the bin limit.
pub fn validate_plan(header: &ModelHeader, plan: &ShardPlan) -> ValidationReport {
    let mut v = Vec::new();
    if plan.strategy == Strategy::Singular {
        if !plan.assignments.is_empty() || !plan.rpc_ops.is_empty() {
            v.push(Violation::SingularWithAssignments);
        }
        return ValidationReport { violations: v };
    }

    let mut by_table: BTreeMap<TableId, Vec<(u32, u32)>> = BTreeMap::new();
    for a in &plan.assignments {
        if header.table(a.table_id).is_none() {
            v.push(Violation::UnknownTable { table: a.table_id });
            continue;
        }
        if a.shard_id >= plan.num_sparse_shards {
            v.push(Violation::ShardOutOfRange { table: a.table_id, shard: a.shard_id });
        }
        by_table.entry(a.table_id).or_default().push((a.partition_index, a.partition_count));
    }
    for t in &header.tables {
        let Some(parts) = by_table.get(&t.table_id) else {
            v.push(Violation::CoverageGap { table: t.table_id, missing: vec![0] });
            continue;
        };
        let count = parts[0].1;
        if count == 0 || parts.iter().any(|p| p.1 != count) {
            v.push(Violation::InconsistentPartitionCount { table: t.table_id });
            continue;
        }
        if count > 1 && matches!(t.pooling, Pooling::Concat { .. }) {
            v.push(Violation::SplitConcatTable { table: t.table_id });
        }
        let mut seen = BTreeSet::new();
        for &(idx, _) in parts {
            if idx >= count {
                v.push(Violation::PartitionIndexOutOfRange { table: t.table_id, partition: idx });
            } else if !seen.insert(idx) {
                v.push(Violation::DuplicateAssignment { table: t.table_id, partition: idx });
            }
        }
        let missing: Vec<u32> = (0..count).filter(|i| !seen.contains(i)).collect();
        if !missing.is_empty() {
            v.push(Violation::CoverageGap { table: t.table_id, missing });
        }
    }

    if plan.strategy == Strategy::Nsbp {
        let mut nets: BTreeMap<ShardId, BTreeSet<NetId>> = BTreeMap::new();
        for a in &plan.assignments {
            if let Some(t) = header.table(a.table_id) {
                nets.entry(a.shard_id).or_default().insert(t.net_id);
            }
        }
        for (shard, set) in nets {
            if set.len() > 1 {
                v.push(Violation::MixedNets { shard, nets: set.into_iter().collect() });
            }
        }
        if let Some(limit) = plan.bin_limit_bytes {
            if plan.assignments.iter().all(|a| a.shard_id < plan.num_sparse_shards) {
                for (shard, bytes) in plan.shard_bytes(header).into_iter().enumerate() {
                    if bytes > limit {
                        v.push(Violation::BinLimitExceeded { shard: shard as u32, bytes, limit });
                    }
                }
            }
        }
    }

    let mut expected = plan.assignments.clone();
    expected.sort();
    let rebuilt = build_rpc_ops(header, &expected);
    if rebuilt != plan.rpc_ops {
        let detail = if rebuilt.len() != plan.rpc_ops.len() {
            format!("expected {} ops, plan lists {}", rebuilt.len(), plan.rpc_ops.len())
        } else {
            "op contents differ from hosted partitions".to_string()
        };
        v.push(Violation::RpcOpMismatch { detail });
    }
    ValidationReport { violations: v }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::test_support::header_with_sizes;
    use crate::planner::{plan_load_balanced, plan_nsbp, TablePartitionAssignment};

    #[test]
    fn duplicate_assignment_detected() {
        let h = header_with_sizes(&[&[4, 3], &[2, 1]]);
        let mut p = plan_load_balanced(&h, &h.profiles(), 2, None).unwrap();
        let dup = p.assignments[0];
        p.assignments.push(TablePartitionAssignment { shard_id: (dup.shard_id + 1) % 2, ..dup });
        let r = validate_plan(&h, &p);
        assert!(r.violations.iter().any(|v| matches!(v, Violation::DuplicateAssignment { .. })));
    }

    #[test]
    fn coverage_gap_detected() {
        let h = header_with_sizes(&[&[4, 3], &[2, 1]]);
        let mut p = plan_load_balanced(&h, &h.profiles(), 2, None).unwrap();
        p.assignments.remove(1);
        let r = validate_plan(&h, &p);
        assert!(r.violations.iter().any(|v| matches!(v, Violation::CoverageGap { .. })));
    }

    #[test]
    fn missing_partition_detected() {
        let h = header_with_sizes(&[&[5, 3], &[9, 2]]);
        let mut p = plan_nsbp(&h, &h.profiles(), 2, Some(32)).unwrap();
        let i = p.assignments.iter().position(|a| a.partition_count == 2).unwrap();
        p.assignments.remove(i);
        let r = validate_plan(&h, &p);
        assert!(r.violations.iter().any(|v| matches!(v, Violation::CoverageGap { table: 2, .. })));
    }

    #[test]
    fn mixed_net_detected() {
        let h = header_with_sizes(&[&[5, 3], &[9, 2]]);
        let mut p = plan_nsbp(&h, &h.profiles(), 2, Some(32)).unwrap();
        let d = p.assignments.iter_mut().find(|a| a.table_id == 3).unwrap();
        d.shard_id = 0;
        let r = validate_plan(&h, &p);
        assert!(r.violations.iter().any(|v| matches!(v, Violation::MixedNets { shard: 0, .. })));
        // The stale op table is reported as well.
        assert!(r.violations.iter().any(|v| matches!(v, Violation::RpcOpMismatch { .. })));
    }
}
