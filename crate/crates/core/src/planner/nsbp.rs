//! Net-specific bin packing.
//!
//! Tables are grouped by net and packed first-fit-decreasing into bins of at
//! most `limit` bytes; a bin never holds tables of two nets. A table larger
//! than the limit is split by row modulus into the fewest partitions that
//! each fit, and every partition gets a dedicated shard.

use std::collections::BTreeMap;

use super::{partition_bytes, PlanError, ShardPlan, Strategy, TablePartitionAssignment};
use crate::model::{ModelHeader, NetId, Pooling, TableMeta, TableProfile};

struct Bin {
    load: u64,
    dedicated: bool,
    parts: Vec<TablePartitionAssignment>,
}

/// Pack with a fixed limit; returns assignments and the shard count.
fn pack(header: &ModelHeader, limit: u64) -> Result<(Vec<TablePartitionAssignment>, u32), PlanError> {
    let mut by_net: BTreeMap<NetId, Vec<&TableMeta>> = BTreeMap::new();
    for t in &header.tables {
        by_net.entry(t.net_id).or_default().push(t);
    }
    let mut assignments = Vec::new();
    let mut next_shard = 0u32;
    for tables in by_net.values_mut() {
        tables.sort_by(|a, b| b.size_bytes().cmp(&a.size_bytes()).then(a.table_id.cmp(&b.table_id)));
        let mut bins: Vec<Bin> = Vec::new();
        for t in tables.iter() {
            let size = t.size_bytes();
            if size > limit {
                if matches!(t.pooling, Pooling::Concat { .. }) {
                    return Err(PlanError::InfeasibleCapacity(format!(
                        "concat table {} ({size} bytes) exceeds bin limit {limit} and cannot be split",
                        t.table_id
                    )));
                }
                let row_bytes = t.dim as u64 * 4;
                if row_bytes > limit {
                    return Err(PlanError::InfeasibleCapacity(format!(
                        "a single row of table {} ({row_bytes} bytes) exceeds bin limit {limit}",
                        t.table_id
                    )));
                }
                let rows_per_part = limit / row_bytes;
                let count = t.num_rows.div_ceil(rows_per_part) as u32;
                for p in 0..count {
                    bins.push(Bin {
                        load: partition_bytes(t.num_rows, t.dim, p, count),
                        dedicated: true,
                        parts: vec![TablePartitionAssignment {
                            table_id: t.table_id,
                            shard_id: 0,
                            partition_index: p,
                            partition_count: count,
                        }],
                    });
                }
                continue;
            }
            let slot = bins.iter_mut().find(|b| !b.dedicated && b.load + size <= limit);
            match slot {
                Some(b) => {
                    b.load += size;
                    b.parts.push(TablePartitionAssignment::whole(t.table_id, 0));
                }
                None => bins.push(Bin {
                    load: size,
                    dedicated: false,
                    parts: vec![TablePartitionAssignment::whole(t.table_id, 0)],
                }),
            }
        }
        for b in bins {
            for mut a in b.parts {
                a.shard_id = next_shard;
                assignments.push(a);
            }
            next_shard += 1;
        }
    }
    Ok((assignments, next_shard))
}

/// Smallest limit (by bisection) whose packing uses at most `k` shards.
fn derive_limit(header: &ModelHeader, k: u32) -> Result<u64, PlanError> {
    let mut per_net: BTreeMap<NetId, u64> = BTreeMap::new();
    for t in &header.tables {
        *per_net.entry(t.net_id).or_default() += t.size_bytes();
    }
    let max_row = header.tables.iter().map(|t| t.dim as u64 * 4).max().unwrap_or(4);
    let max_concat = header
        .tables
        .iter()
        .filter(|t| matches!(t.pooling, Pooling::Concat { .. }))
        .map(TableMeta::size_bytes)
        .max()
        .unwrap_or(0);
    let mut hi = per_net.values().copied().max().unwrap_or(4).max(max_row);
    let mut lo = max_row.max(max_concat);
    if lo > hi {
        return Ok(lo);
    }
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        match pack(header, mid) {
            Ok((_, n)) if n <= k => hi = mid,
            _ => lo = mid + 1,
        }
    }
    Ok(hi)
}

/// Plan with net-specific bin packing. With `bin_limit_bytes` unset the
/// limit is derived so the packing fits in `k` shards; with an explicit
/// limit the resulting shard count may differ from `k`.
pub fn plan_nsbp(
    header: &ModelHeader,
    _profiles: &[TableProfile],
    k: u32,
    bin_limit_bytes: Option<u64>,
) -> Result<ShardPlan, PlanError> {
    let nets = header.nets.len() as u32;
    if k < nets.max(1) {
        return Err(PlanError::InvalidShardCount {
            k,
            reason: format!("net-specific packing needs at least one shard per net ({nets})"),
        });
    }
    let limit = match bin_limit_bytes {
        Some(0) => return Err(PlanError::InfeasibleCapacity("bin limit must be positive".into())),
        Some(l) => l,
        None => derive_limit(header, k)?,
    };
    let (assignments, shards) = pack(header, limit)?;
    Ok(ShardPlan::assemble(header, Strategy::Nsbp, shards, Some(limit), assignments))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_model, Archetype, SizeBudget};
    use crate::planner::test_support::header_with_sizes;
    use crate::planner::{plan_one_shard, validate_plan};

    fn nets_of_shard(h: &ModelHeader, p: &ShardPlan, s: u32) -> Vec<NetId> {
        let mut v: Vec<NetId> = p.shard_contents(s).iter().map(|a| h.table(a.table_id).unwrap().net_id).collect();
        v.sort();
        v.dedup();
        v
    }

    #[test]
    fn hand_packed_example() {
        // net0 {A:5, B:3}, net1 {C:9, D:2}; sizes in units of 4 bytes.
        let h = header_with_sizes(&[&[5, 3], &[9, 2]]);
        let p = plan_nsbp(&h, &h.profiles(), 2, Some(8 * 4)).unwrap();
        let contents: Vec<Vec<(u32, u32, u32)>> = (0..p.num_sparse_shards)
            .map(|s| p.shard_contents(s).iter().map(|a| (a.table_id, a.partition_index, a.partition_count)).collect())
            .collect();
        assert_eq!(
            contents,
            vec![vec![(0, 0, 1), (1, 0, 1)], vec![(2, 0, 2)], vec![(2, 1, 2)], vec![(3, 0, 1)]]
        );
        for s in 0..p.num_sparse_shards {
            assert_eq!(nets_of_shard(&h, &p, s).len(), 1);
        }
        assert!(validate_plan(&h, &p).is_clean());
    }

    #[test]
    fn single_dominant_k4_splits_largest_three_ways() {
        let h = generate_model(Archetype::SingleDominant, SizeBudget::mib(16), 7).unwrap().header();
        let p = plan_nsbp(&h, &h.profiles(), 4, None).unwrap();
        assert_eq!(p.num_sparse_shards, 4);
        let big = h.tables.iter().max_by_key(|t| t.size_bytes()).unwrap().table_id;
        let parts = p.partitions_of(big);
        assert_eq!(parts.len(), 3);
        let big_shards: Vec<u32> = parts.iter().map(|a| a.shard_id).collect();
        let rest: std::collections::BTreeSet<u32> = p
            .assignments
            .iter()
            .filter(|a| a.table_id != big)
            .map(|a| a.shard_id)
            .collect();
        assert_eq!(rest.len(), 1);
        assert!(!big_shards.contains(rest.iter().next().unwrap()));
    }

    #[test]
    fn single_dominant_shard_counts_match_k() {
        let h = generate_model(Archetype::SingleDominant, SizeBudget::mib(8), 3).unwrap().header();
        for k in [2, 4, 8] {
            let p = plan_nsbp(&h, &h.profiles(), k, None).unwrap();
            assert_eq!(p.num_sparse_shards, k);
            assert!(validate_plan(&h, &p).is_clean());
        }
    }

    #[test]
    fn one_net_under_limit_k1_is_one_shard() {
        let h = header_with_sizes(&[&[3, 2, 1]]);
        let p = plan_nsbp(&h, &h.profiles(), 1, None).unwrap();
        let o = plan_one_shard(&h);
        assert_eq!(p.assignments, o.assignments);
        assert_eq!(p.rpc_ops, o.rpc_ops);
    }

    #[test]
    fn too_few_shards_for_nets() {
        let h = header_with_sizes(&[&[3], &[2]]);
        assert!(matches!(plan_nsbp(&h, &h.profiles(), 1, None), Err(PlanError::InvalidShardCount { .. })));
    }

    #[test]
    fn long_tail_plans_are_net_pure_within_limit() {
        let h = generate_model(Archetype::LongTail, SizeBudget::mib(4), 1).unwrap().header();
        for k in [2, 4, 8] {
            let p = plan_nsbp(&h, &h.profiles(), k, None).unwrap();
            assert!(p.num_sparse_shards <= k);
            let limit = p.bin_limit_bytes.unwrap();
            for (s, b) in p.shard_bytes(&h).iter().enumerate() {
                assert!(*b <= limit);
                assert_eq!(nets_of_shard(&h, &p, s as u32).len(), 1);
            }
            assert!(p.max_rpcs_per_batch() <= p.num_sparse_shards as usize);
        }
    }
}
