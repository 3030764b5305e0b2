//! Shard planning: maps embedding tables (or row-modulus partitions of
//! them) onto sparse shards and derives the RPC operators the main shard
//! issues per net.

mod balanced;
mod file;
mod nsbp;
mod profile;
mod validate;

pub use balanced::{plan_capacity_balanced, plan_load_balanced};
pub use file::{load_plan, parse_plan, render_plan, save_plan, PLAN_MAGIC};
pub use nsbp::plan_nsbp;
pub use profile::{estimate_pooling_factors, DEFAULT_PROFILE_SAMPLE};
pub use validate::{validate_plan, ValidationReport, Violation};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelHeader, NetId, TableId, TableProfile};

pub type ShardId = u32;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("pooling-factor sample is empty")]
    EmptySample,
    #[error("infeasible capacity: {0}")]
    InfeasibleCapacity(String),
    #[error("invalid shard count {k}: {reason}")]
    InvalidShardCount { k: u32, reason: String },
    #[error("profile for table {0} is missing")]
    MissingProfile(TableId),
    #[error("plan parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Singular,
    OneShard,
    CapacityBalanced,
    LoadBalanced,
    Nsbp,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Singular,
        Strategy::OneShard,
        Strategy::CapacityBalanced,
        Strategy::LoadBalanced,
        Strategy::Nsbp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Singular => "singular",
            Strategy::OneShard => "one_shard",
            Strategy::CapacityBalanced => "capacity_balanced",
            Strategy::LoadBalanced => "load_balanced",
            Strategy::Nsbp => "nsbp",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TablePartitionAssignment {
    pub table_id: TableId,
    pub shard_id: ShardId,
    pub partition_index: u32,
    pub partition_count: u32,
}

impl TablePartitionAssignment {
    pub fn whole(table_id: TableId, shard_id: ShardId) -> Self {
        Self { table_id, shard_id, partition_index: 0, partition_count: 1 }
    }

    pub fn part(&self) -> PartitionRef {
        PartitionRef {
            table_id: self.table_id,
            partition_index: self.partition_index,
            partition_count: self.partition_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PartitionRef {
    pub table_id: TableId,
    pub partition_index: u32,
    pub partition_count: u32,
}

impl PartitionRef {
    pub fn is_split(&self) -> bool {
        self.partition_count > 1
    }
}

/// One remote lookup operator: all partitions of one net's tables hosted on
/// one shard, served by a single RPC per batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RpcOpDescriptor {
    pub op_id: u32,
    pub net_id: NetId,
    pub shard_id: ShardId,
    pub partitions: Vec<PartitionRef>,
}

impl RpcOpDescriptor {
    /// An op serving only row partitions of split tables is issued for a
    /// batch only when some lookup routes to it; any other op is issued
    /// for every batch.
    pub fn is_conditional(&self) -> bool {
        !self.partitions.is_empty() && self.partitions.iter().all(PartitionRef::is_split)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardPlan {
    pub model_id: String,
    pub strategy: Strategy,
    pub num_sparse_shards: u32,
    /// Bin limit used by NSBP, if any.
    pub bin_limit_bytes: Option<u64>,
    pub assignments: Vec<TablePartitionAssignment>,
    pub rpc_ops: Vec<RpcOpDescriptor>,
}

impl ShardPlan {
    pub(crate) fn assemble(
        header: &ModelHeader,
        strategy: Strategy,
        num_sparse_shards: u32,
        bin_limit_bytes: Option<u64>,
        mut assignments: Vec<TablePartitionAssignment>,
    ) -> Self {
        assignments.sort();
        let rpc_ops = build_rpc_ops(header, &assignments);
        ShardPlan {
            model_id: header.model_id.clone(),
            strategy,
            num_sparse_shards,
            bin_limit_bytes,
            assignments,
            rpc_ops,
        }
    }

    pub fn is_singular(&self) -> bool {
        self.strategy == Strategy::Singular
    }

    /// Assignments of one table, ordered by partition index.
    pub fn partitions_of(&self, table: TableId) -> Vec<TablePartitionAssignment> {
        let mut v: Vec<_> = self.assignments.iter().filter(|a| a.table_id == table).copied().collect();
        v.sort_by_key(|a| a.partition_index);
        v
    }

    pub fn partition_count(&self, table: TableId) -> u32 {
        self.assignments
            .iter()
            .find(|a| a.table_id == table)
            .map(|a| a.partition_count)
            .unwrap_or(0)
    }

    pub fn shard_of(&self, table: TableId, partition: u32) -> Option<ShardId> {
        self.assignments
            .iter()
            .find(|a| a.table_id == table && a.partition_index == partition)
            .map(|a| a.shard_id)
    }

    /// Partitions hosted by one shard.
    pub fn shard_contents(&self, shard: ShardId) -> Vec<TablePartitionAssignment> {
        self.assignments.iter().filter(|a| a.shard_id == shard).copied().collect()
    }

    pub fn ops_for_net(&self, net: NetId) -> impl Iterator<Item = &RpcOpDescriptor> {
        self.rpc_ops.iter().filter(move |op| op.net_id == net)
    }

    pub fn shard_bytes(&self, header: &ModelHeader) -> Vec<u64> {
        let mut out = vec![0u64; self.num_sparse_shards as usize];
        for a in &self.assignments {
            if let Some(t) = header.table(a.table_id) {
                out[a.shard_id as usize] += partition_bytes(t.num_rows, t.dim, a.partition_index, a.partition_count);
            }
        }
        out
    }

    /// Per-shard sum of pooling factors; split tables contribute their
    /// pooling factor spread evenly over partitions.
    pub fn shard_pooling(&self, profiles: &[TableProfile]) -> Vec<f64> {
        let mut out = vec![0f64; self.num_sparse_shards as usize];
        for a in &self.assignments {
            if let Some(p) = profiles.iter().find(|p| p.table_id == a.table_id) {
                out[a.shard_id as usize] += p.est_pooling_factor / a.partition_count as f64;
            }
        }
        out
    }

    /// Upper bound on RPCs per batch: every op issued once.
    pub fn max_rpcs_per_batch(&self) -> usize {
        self.rpc_ops.len()
    }

    /// RPCs the runtime issues for `net` in a batch whose lookups touch
    /// the partitions accepted by `touched`.
    pub fn rpcs_for_batch(&self, net: NetId, touched: impl Fn(&PartitionRef) -> bool) -> usize {
        self.ops_for_net(net)
            .filter(|op| !op.is_conditional() || op.partitions.iter().any(&touched))
            .count()
    }

    /// Short content hash used to tag analysis outputs.
    pub fn plan_hash(&self) -> String {
        let digest = Sha256::digest(render_plan(self).as_bytes());
        hex::encode(&digest[..8])
    }
}

pub(crate) fn partition_bytes(num_rows: u64, dim: u32, index: u32, count: u32) -> u64 {
    crate::model::partition_rows(num_rows, index as u64, count as u64) * dim as u64 * 4
}

pub(crate) fn build_rpc_ops(header: &ModelHeader, assignments: &[TablePartitionAssignment]) -> Vec<RpcOpDescriptor> {
    let mut groups: BTreeMap<(NetId, ShardId), BTreeSet<PartitionRef>> = BTreeMap::new();
    for a in assignments {
        let Some(t) = header.table(a.table_id) else { continue };
        groups.entry((t.net_id, a.shard_id)).or_default().insert(a.part());
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(i, ((net_id, shard_id), parts))| RpcOpDescriptor {
            op_id: i as u32,
            net_id,
            shard_id,
            partitions: parts.into_iter().collect(),
        })
        .collect()
}

pub fn plan_singular(header: &ModelHeader) -> ShardPlan {
    ShardPlan::assemble(header, Strategy::Singular, 0, None, Vec::new())
}

pub fn plan_one_shard(header: &ModelHeader) -> ShardPlan {
    let assignments = header
        .tables
        .iter()
        .map(|t| TablePartitionAssignment::whole(t.table_id, 0))
        .collect();
    ShardPlan::assemble(header, Strategy::OneShard, 1, None, assignments)
}

/// Knobs shared by the planning entry points.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlanOptions {
    /// Per-shard byte budget for the balanced strategies.
    pub shard_capacity_bytes: Option<u64>,
    /// NSBP bin limit; derived from the shard count when absent.
    pub bin_limit_bytes: Option<u64>,
}

/// Dispatch to the strategy's planner.
pub fn plan(
    header: &ModelHeader,
    profiles: &[TableProfile],
    strategy: Strategy,
    k: u32,
    opts: PlanOptions,
) -> Result<ShardPlan, PlanError> {
    match strategy {
        Strategy::Singular => Ok(plan_singular(header)),
        Strategy::OneShard => Ok(plan_one_shard(header)),
        Strategy::CapacityBalanced => plan_capacity_balanced(header, profiles, k, opts.shard_capacity_bytes),
        Strategy::LoadBalanced => plan_load_balanced(header, profiles, k, opts.shard_capacity_bytes),
        Strategy::Nsbp => plan_nsbp(header, profiles, k, opts.bin_limit_bytes),
    }
}
