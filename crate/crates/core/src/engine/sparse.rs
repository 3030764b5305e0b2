use std::collections::HashMap;

use super::EngineError;
use crate::model::{sls_pool_into, EmbeddingTable, ModelSpec, NetId, Pooling, TableId};
use crate::planner::{ShardId, ShardPlan};
use crate::trace::{Attrs, Layer, SpanCtx, Tracer};

/// Lookups for one table partition: `lengths[i]` local indices per instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupEntry {
    pub table_id: TableId,
    pub partition_index: u32,
    pub lengths: Vec<u32>,
    pub indices: Vec<u32>,
}

/// Everything one RPC op asks of one sparse shard for one batch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SparseLookupRequest {
    pub net_id: NetId,
    pub batch_index: u32,
    pub entries: Vec<LookupEntry>,
}

/// Pooled vectors of one table partition, concatenated over instances;
/// `item_lens[i]` floats belong to instance `i`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PartialEntry {
    pub table_id: TableId,
    pub partition_index: u32,
    pub item_lens: Vec<u32>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseLookupResponse {
    pub entries: Vec<PartialEntry>,
}

/// Embedding partitions hosted by one sparse shard.
#[derive(Debug)]
pub struct SparseShard {
    pub shard_id: ShardId,
    partitions: HashMap<(TableId, u32), EmbeddingTable>,
}

impl SparseShard {
    /// Cut this shard's partitions out of full tables. Tables not placed on
    /// the shard are ignored; placed tables missing from `tables` are an
    /// error.
    pub fn from_tables<'a>(
        shard_id: ShardId,
        plan: &ShardPlan,
        tables: impl IntoIterator<Item = &'a EmbeddingTable>,
    ) -> Result<Self, EngineError> {
        let by_id: HashMap<TableId, &EmbeddingTable> = tables.into_iter().map(|t| (t.table_id(), t)).collect();
        let mut partitions = HashMap::new();
        for a in plan.shard_contents(shard_id) {
            let t = by_id.get(&a.table_id).ok_or(EngineError::UnknownPartition {
                shard: shard_id,
                table_id: a.table_id,
                partition_index: a.partition_index,
            })?;
            let part = if a.partition_count == 1 { (*t).clone() } else { t.partition(a.partition_index, a.partition_count) };
            partitions.insert((a.table_id, a.partition_index), part);
        }
        Ok(SparseShard { shard_id, partitions })
    }

    pub fn from_spec(shard_id: ShardId, plan: &ShardPlan, spec: &ModelSpec) -> Result<Self, EngineError> {
        Self::from_tables(shard_id, plan, &spec.tables)
    }

    pub fn hosts(&self, table: TableId, partition: u32) -> bool {
        self.partitions.contains_key(&(table, partition))
    }

    pub fn hosted_bytes(&self) -> u64 {
        self.partitions.values().map(|t| t.values.len() as u64 * 4).sum()
    }

    /// Pool every entry against local rows only.
    pub fn execute(
        &self,
        lookup: &SparseLookupRequest,
        tracer: &Tracer,
        parent: SpanCtx,
    ) -> Result<SparseLookupResponse, EngineError> {
        let attrs = Attrs::default().net(lookup.net_id).batch(lookup.batch_index);
        let net_span = tracer.span(parent, Layer::NetOverhead, "sparse_net", attrs);
        let mut entries = Vec::with_capacity(lookup.entries.len());
        for e in &lookup.entries {
            let table = self.partitions.get(&(e.table_id, e.partition_index)).ok_or(EngineError::UnknownPartition {
                shard: self.shard_id,
                table_id: e.table_id,
                partition_index: e.partition_index,
            })?;
            let total: u64 = e.lengths.iter().map(|&n| n as u64).sum();
            if total != e.indices.len() as u64 {
                return Err(EngineError::InvalidRequest(format!(
                    "table {} partition {}: lengths sum to {total} but {} indices were sent",
                    e.table_id,
                    e.partition_index,
                    e.indices.len()
                )));
            }
            let _op = net_span.child(Layer::SparseOp, "sls", attrs.table(e.table_id));
            let dim = table.dim();
            let mut item_lens = Vec::with_capacity(e.lengths.len());
            let mut values = Vec::new();
            let mut at = 0usize;
            for &n in &e.lengths {
                let slice = &e.indices[at..at + n as usize];
                at += n as usize;
                let width = match table.meta.pooling {
                    Pooling::Sum => dim,
                    Pooling::Concat { .. } => dim * slice.len(),
                };
                let start = values.len();
                values.resize(start + width, 0.0);
                sls_pool_into(table, slice, &mut values[start..]).map_err(|err| match err {
                    crate::model::ModelError::IndexOutOfRange { table_id, index, num_rows } => {
                        EngineError::IndexOutOfRange { table_id, index, num_rows }
                    }
                    other => EngineError::Model(other),
                })?;
                item_lens.push(width as u32);
            }
            entries.push(PartialEntry { table_id: e.table_id, partition_index: e.partition_index, item_lens, values });
        }
        Ok(SparseLookupResponse { entries })
    }
}

/// One RPC op's request bound for a shard.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardCall {
    pub op_id: u32,
    pub shard_id: ShardId,
    pub request: SparseLookupRequest,
}

/// How the main shard reaches sparse shards. Implementations issue all
/// calls concurrently where they can and return responses in call order.
pub trait SparseDispatch: Send + Sync {
    fn dispatch(&self, calls: &[ShardCall], tracer: &Tracer, parent: SpanCtx) -> Result<Vec<SparseLookupResponse>, EngineError>;
}

/// In-process dispatch straight into [`SparseShard`]s, no serialization.
#[derive(Debug)]
pub struct LocalDispatch {
    shards: Vec<SparseShard>,
    tracer: Tracer,
}

impl LocalDispatch {
    pub fn new(shards: Vec<SparseShard>) -> Self {
        LocalDispatch { shards, tracer: Tracer::disabled(crate::trace::ShardTag::Sparse(0)) }
    }

    /// Build every shard of `plan` from a full model.
    pub fn from_spec(plan: &ShardPlan, spec: &ModelSpec) -> Result<Self, EngineError> {
        let shards = (0..plan.num_sparse_shards)
            .map(|s| SparseShard::from_spec(s, plan, spec))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(shards))
    }

    pub fn shard(&self, id: ShardId) -> Option<&SparseShard> {
        self.shards.iter().find(|s| s.shard_id == id)
    }
}

impl SparseDispatch for LocalDispatch {
    fn dispatch(&self, calls: &[ShardCall], _tracer: &Tracer, parent: SpanCtx) -> Result<Vec<SparseLookupResponse>, EngineError> {
        calls
            .iter()
            .map(|c| {
                let shard = self.shard(c.shard_id).ok_or_else(|| EngineError::ShardUnavailable {
                    shard: c.shard_id,
                    reason: "shard not present in local dispatch".into(),
                })?;
                shard.execute(&c.request, &self.tracer, parent)
            })
            .collect()
    }
}
