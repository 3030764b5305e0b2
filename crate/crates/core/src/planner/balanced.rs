//! Capacity- and load-balanced placement: largest-first greedy (LPT) into
//! the least-loaded shard, ties to the lowest shard index. Tables are never
//! split.

use std::collections::HashMap;

use super::{PlanError, ShardPlan, Strategy, TablePartitionAssignment};
use crate::model::{ModelHeader, TableId, TableProfile};

/// Assign weighted items to `k` bins. Items are visited by descending
/// weight, ties by ascending id. Returns the bin index for each item.
pub(crate) fn lpt(items: &[(TableId, f64)], k: usize) -> Vec<(TableId, usize)> {
    let mut order: Vec<&(TableId, f64)> = items.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut loads = vec![0f64; k];
    let mut out = Vec::with_capacity(items.len());
    for &(id, w) in order {
        let (bin, _) = loads
            .iter()
            .enumerate()
            .fold((0usize, f64::INFINITY), |best, (i, &l)| if l < best.1 { (i, l) } else { best });
        loads[bin] += w;
        out.push((id, bin));
    }
    out
}

fn check_k(k: u32) -> Result<(), PlanError> {
    if k == 0 {
        return Err(PlanError::InvalidShardCount { k, reason: "at least one shard is required".into() });
    }
    Ok(())
}

fn finish(
    header: &ModelHeader,
    strategy: Strategy,
    k: u32,
    placed: Vec<(TableId, usize)>,
    capacity: Option<u64>,
) -> Result<ShardPlan, PlanError> {
    let assignments = placed
        .into_iter()
        .map(|(t, s)| TablePartitionAssignment::whole(t, s as u32))
        .collect();
    let plan = ShardPlan::assemble(header, strategy, k, None, assignments);
    if let Some(cap) = capacity {
        for (shard, bytes) in plan.shard_bytes(header).into_iter().enumerate() {
            if bytes > cap {
                return Err(PlanError::InfeasibleCapacity(format!(
                    "shard {shard} needs {bytes} bytes, budget is {cap}; tables are not split under {strategy}"
                )));
            }
        }
    }
    Ok(plan)
}

/// Place tables so every shard holds a similar number of bytes.
pub fn plan_capacity_balanced(
    header: &ModelHeader,
    _profiles: &[TableProfile],
    k: u32,
    shard_capacity_bytes: Option<u64>,
) -> Result<ShardPlan, PlanError> {
    check_k(k)?;
    let items: Vec<(TableId, f64)> = header.tables.iter().map(|t| (t.table_id, t.size_bytes() as f64)).collect();
    let placed = lpt(&items, k as usize);
    finish(header, Strategy::CapacityBalanced, k, placed, shard_capacity_bytes)
}

/// Place tables so every shard performs a similar amount of pooling work.
/// Falls back to byte sizes when every pooling factor is zero.
pub fn plan_load_balanced(
    header: &ModelHeader,
    profiles: &[TableProfile],
    k: u32,
    shard_capacity_bytes: Option<u64>,
) -> Result<ShardPlan, PlanError> {
    check_k(k)?;
    let pf: HashMap<TableId, f64> = profiles.iter().map(|p| (p.table_id, p.est_pooling_factor)).collect();
    let mut items = Vec::with_capacity(header.tables.len());
    for t in &header.tables {
        let w = *pf.get(&t.table_id).ok_or(PlanError::MissingProfile(t.table_id))?;
        items.push((t.table_id, w));
    }
    if items.iter().all(|(_, w)| *w == 0.0) {
        return plan_capacity_balanced(header, profiles, k, shard_capacity_bytes)
            .map(|p| ShardPlan { strategy: Strategy::LoadBalanced, ..p });
    }
    let placed = lpt(&items, k as usize);
    finish(header, Strategy::LoadBalanced, k, placed, shard_capacity_bytes)
}
