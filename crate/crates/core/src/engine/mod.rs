//! Request execution on the main shard and lookup execution on sparse
//! shards.
//!
//! A request is split into batches that run in parallel up to a worker
//! budget. Inside a batch the user net runs first, then the candidate net;
//! each net's remote lookups are issued together and awaited before its
//! interaction layers.

mod batch;
mod route;
mod sparse;

pub use batch::{split_batches, Batch, BatchFeature, BatchSize};
pub use route::{route_indices, RoutedPartition};
pub use sparse::{
    LocalDispatch, LookupEntry, PartialEntry, ShardCall, SparseDispatch, SparseLookupRequest, SparseLookupResponse,
    SparseShard,
};

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use thiserror::Error;

use crate::model::{
    fc_forward_into, sls_pool_into, DenseLayer, EmbeddingTable, LayerId, ModelError, ModelHeader, ModelSpec, Net,
    NetRole, PartialModel, Pooling, TableId, TableMeta,
};
use crate::planner::{ShardId, ShardPlan};
use crate::request::RankingRequest;
use crate::trace::{Attrs, Layer, SpanCtx, Tracer};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("index {index} out of range for table {table_id} ({num_rows} rows)")]
    IndexOutOfRange { table_id: TableId, index: u64, num_rows: u64 },
    #[error("shard {shard} does not host table {table_id} partition {partition_index}")]
    UnknownPartition { shard: ShardId, table_id: TableId, partition_index: u32 },
    #[error("sparse shard {shard} unavailable: {reason}")]
    ShardUnavailable { shard: ShardId, reason: String },
    #[error("rpc to sparse shard {shard} timed out after {deadline:?}")]
    RpcTimeout { shard: ShardId, deadline: Duration },
    #[error("sparse shard {shard} failed: {message}")]
    RemoteExecution { shard: ShardId, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Default per-RPC deadline.
pub const DEFAULT_RPC_DEADLINE: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Copy)]
pub struct EngineConfig {
    pub batch_size: BatchSize,
    /// Batches of one request executing at once.
    pub workers: usize,
}

impl EngineConfig {
    pub fn new(batch_size: BatchSize) -> Self {
        let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        EngineConfig { batch_size, workers }
    }

    pub fn workers(mut self, n: usize) -> Self {
        self.workers = n.max(1);
        self
    }
}

/// The main shard's executor: all dense layers, plus every table when the
/// plan is singular.
#[derive(Debug)]
pub struct MainEngine {
    header: ModelHeader,
    plan: ShardPlan,
    layers: HashMap<LayerId, DenseLayer>,
    local_tables: HashMap<TableId, EmbeddingTable>,
    config: EngineConfig,
}

impl MainEngine {
    /// Build from a full model; tables are kept only for a singular plan.
    pub fn from_spec(spec: &ModelSpec, plan: ShardPlan, config: EngineConfig) -> Result<Self, EngineError> {
        let tables = if plan.is_singular() { spec.tables.clone() } else { Vec::new() };
        Self::new(spec.header(), spec.layers.clone(), tables, plan, config)
    }

    pub fn from_partial(model: PartialModel, plan: ShardPlan, config: EngineConfig) -> Result<Self, EngineError> {
        Self::new(model.header, model.layers, model.tables, plan, config)
    }

    pub fn new(
        header: ModelHeader,
        layers: Vec<DenseLayer>,
        tables: Vec<EmbeddingTable>,
        plan: ShardPlan,
        config: EngineConfig,
    ) -> Result<Self, EngineError> {
        if plan.model_id != header.model_id {
            return Err(EngineError::InvalidRequest(format!(
                "plan is for model `{}`, engine holds `{}`",
                plan.model_id, header.model_id
            )));
        }
        let layers: HashMap<LayerId, DenseLayer> = layers.into_iter().map(|l| (l.meta.layer_id, l)).collect();
        for l in &header.layers {
            if !layers.contains_key(&l.layer_id) {
                return Err(EngineError::InvalidRequest(format!("dense layer {} is not loaded", l.layer_id)));
            }
        }
        let local_tables: HashMap<TableId, EmbeddingTable> = tables.into_iter().map(|t| (t.table_id(), t)).collect();
        if plan.is_singular() {
            if let Some(t) = header.tables.iter().find(|t| !local_tables.contains_key(&t.table_id)) {
                return Err(EngineError::InvalidRequest(format!("singular plan but table {} is not loaded", t.table_id)));
            }
        }
        Ok(MainEngine { header, plan, layers, local_tables, config })
    }

    pub fn header(&self) -> &ModelHeader {
        &self.header
    }

    pub fn plan(&self) -> &ShardPlan {
        &self.plan
    }

    pub fn config(&self) -> EngineConfig {
        self.config
    }

    /// Score every candidate, in candidate order. Spans are children of
    /// `parent`.
    pub fn execute(
        &self,
        request: &RankingRequest,
        dispatch: &dyn SparseDispatch,
        tracer: &Tracer,
        parent: SpanCtx,
    ) -> Result<Vec<f32>, EngineError> {
        request.validate(&self.header).map_err(EngineError::InvalidRequest)?;
        let batches = split_batches(request, self.config.batch_size);
        let workers = self.config.workers.min(batches.len()).max(1);
        let mut scores = vec![0f32; request.candidates.len()];
        if workers == 1 {
            for b in &batches {
                let out = self.run_batch(request, b, dispatch, tracer, parent)?;
                scores[b.items.clone()].copy_from_slice(&out);
            }
            return Ok(scores);
        }
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<(usize, Result<Vec<f32>, EngineError>)>> = Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(b) = batches.get(i) else { break };
                    let r = self.run_batch(request, b, dispatch, tracer, parent);
                    let failed = r.is_err();
                    results.lock().expect("results lock").push((i, r));
                    if failed {
                        next.store(batches.len(), Ordering::Relaxed);
                    }
                });
            }
        });
        let mut results = results.into_inner().expect("results lock");
        results.sort_by_key(|(i, _)| *i);
        for (i, r) in results {
            let out = r?;
            scores[batches[i].items.clone()].copy_from_slice(&out);
        }
        Ok(scores)
    }

    fn run_batch(
        &self,
        request: &RankingRequest,
        batch: &Batch,
        dispatch: &dyn SparseDispatch,
        tracer: &Tracer,
        parent: SpanCtx,
    ) -> Result<Vec<f32>, EngineError> {
        let span = tracer.span(parent, Layer::NetOverhead, "batch", Attrs::default().batch(batch.batch_index));
        let nets = self.header.nets_in_order();
        let two_net = nets.len() == 2;
        let mut user_out: Option<Vec<f32>> = None;
        let mut final_out = Vec::new();
        for net in nets {
            let attrs = Attrs::default().net(net.net_id).batch(batch.batch_index);
            let net_span = span.child(Layer::NetOverhead, "net", attrs);
            let ctx = net_span.ctx();
            let pooled = if self.plan.is_singular() {
                self.pool_local(net, batch, tracer, ctx, attrs)?
            } else {
                self.pool_remote(net, batch, dispatch, tracer, ctx, attrs)?
            };
            let request_level = two_net && net.role == NetRole::User;
            let dense: Vec<&[f32]> = if request_level {
                vec![request.user_dense.as_slice()]
            } else {
                request.candidates[batch.items.clone()].iter().map(|c| c.dense.as_slice()).collect()
            };
            let out = self.run_dense(net, &dense, &pooled, user_out.as_deref(), tracer, ctx, attrs)?;
            drop(net_span);
            if request_level {
                user_out = Some(out);
            } else {
                final_out = out;
            }
        }
        Ok(final_out)
    }

    fn pool_local(
        &self,
        net: &Net,
        batch: &Batch,
        tracer: &Tracer,
        parent: SpanCtx,
        attrs: Attrs,
    ) -> Result<Vec<Pooled>, EngineError> {
        let mut out = Vec::with_capacity(net.table_ids.len());
        for &tid in &net.table_ids {
            let meta = self.table_meta(tid)?;
            let table = &self.local_tables[&tid];
            let feature = self.feature_or_empty(batch, meta, net);
            let _op = tracer.span(parent, Layer::SparseOp, "sls", attrs.table(tid));
            let mut pooled = Pooled::zeros(meta, &feature)?;
            for (inst, slice) in feature.per_instance().enumerate() {
                sls_pool_into(table, slice, pooled.instance_mut(inst)).map_err(model_to_engine)?;
            }
            out.push(pooled);
        }
        Ok(out)
    }

    fn pool_remote(
        &self,
        net: &Net,
        batch: &Batch,
        dispatch: &dyn SparseDispatch,
        tracer: &Tracer,
        parent: SpanCtx,
        attrs: Attrs,
    ) -> Result<Vec<Pooled>, EngineError> {
        // Route every table's lookups to its partitions.
        let mut routed: HashMap<(TableId, u32), RoutedPartition> = HashMap::new();
        let mut features = Vec::with_capacity(net.table_ids.len());
        for &tid in &net.table_ids {
            let meta = self.table_meta(tid)?;
            let feature = self.feature_or_empty(batch, meta, net);
            let p = self.plan.partition_count(tid);
            if p == 0 {
                return Err(EngineError::InvalidRequest(format!("plan does not place table {tid}")));
            }
            if p > 1 && matches!(meta.pooling, Pooling::Concat { .. }) {
                return Err(EngineError::InvalidRequest(format!("concat table {tid} cannot be split")));
            }
            for r in route_indices(meta, p, &feature)? {
                routed.insert((tid, r.partition_index), r);
            }
            features.push((meta, feature));
        }
        let mut calls = Vec::new();
        for op in self.plan.ops_for_net(net.net_id) {
            let mut entries = Vec::new();
            for part in &op.partitions {
                let Some(r) = routed.get(&(part.table_id, part.partition_index)) else { continue };
                if r.indices.is_empty() {
                    continue;
                }
                entries.push(LookupEntry {
                    table_id: part.table_id,
                    partition_index: part.partition_index,
                    lengths: r.lengths.clone(),
                    indices: r.indices.clone(),
                });
            }
            if op.is_conditional() && entries.is_empty() {
                continue;
            }
            calls.push(ShardCall {
                op_id: op.op_id,
                shard_id: op.shard_id,
                request: SparseLookupRequest { net_id: net.net_id, batch_index: batch.batch_index, entries },
            });
        }
        let responses = if calls.is_empty() { Vec::new() } else { dispatch.dispatch(&calls, tracer, parent)? };
        if responses.len() != calls.len() {
            return Err(EngineError::RemoteExecution {
                shard: calls.first().map(|c| c.shard_id).unwrap_or(0),
                message: format!("{} responses for {} calls", responses.len(), calls.len()),
            });
        }

        let _merge = tracer.span(parent, Layer::SparseOp, "merge_partials", attrs);
        let mut partials: HashMap<(TableId, u32), (&PartialEntry, ShardId)> = HashMap::new();
        for (call, resp) in calls.iter().zip(&responses) {
            for e in &resp.entries {
                partials.insert((e.table_id, e.partition_index), (e, call.shard_id));
            }
        }
        let mut out = Vec::with_capacity(features.len());
        for (meta, feature) in features {
            let mut pooled = Pooled::zeros(meta, &feature)?;
            // Fixed ascending partition order keeps the merge reproducible.
            for p in 0..self.plan.partition_count(meta.table_id) {
                let Some((partial, shard)) = partials.get(&(meta.table_id, p)) else { continue };
                pooled.accumulate(partial, *shard)?;
            }
            out.push(pooled);
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_dense(
        &self,
        net: &Net,
        dense: &[&[f32]],
        pooled: &[Pooled],
        user_out: Option<&[f32]>,
        tracer: &Tracer,
        parent: SpanCtx,
        attrs: Attrs,
    ) -> Result<Vec<f32>, EngineError> {
        let n = dense.len();
        let mut x: Vec<Vec<f32>> = dense.iter().map(|d| d.to_vec()).collect();
        for &lid in &net.bottom_layers {
            x = self.fc(lid, &x, tracer, parent, attrs)?;
        }
        {
            let _s = tracer.span(parent, Layer::DenseOp, "concat", attrs);
            for (i, row) in x.iter_mut().enumerate() {
                for p in pooled {
                    row.extend_from_slice(p.instance(if p.instances == 1 { 0 } else { i }));
                }
                if net.role == NetRole::Candidate {
                    if let Some(u) = user_out {
                        row.extend_from_slice(u);
                    }
                }
            }
        }
        for &lid in net.interaction_layers.iter().chain(&net.top_layers) {
            x = self.fc(lid, &x, tracer, parent, attrs)?;
        }
        let mut out = Vec::with_capacity(n * x.first().map_or(0, Vec::len));
        for row in x {
            out.extend(row);
        }
        Ok(out)
    }

    fn fc(&self, lid: LayerId, x: &[Vec<f32>], tracer: &Tracer, parent: SpanCtx, attrs: Attrs) -> Result<Vec<Vec<f32>>, EngineError> {
        let layer = &self.layers[&lid];
        let _s = tracer.span(parent, Layer::DenseOp, "fc", attrs.layer(lid));
        x.iter()
            .map(|row| {
                let mut out = vec![0f32; layer.out_dim()];
                fc_forward_into(layer, row, &mut out)?;
                Ok(out)
            })
            .collect()
    }

    fn table_meta(&self, tid: TableId) -> Result<&TableMeta, EngineError> {
        self.header
            .table(tid)
            .ok_or_else(|| EngineError::InvalidRequest(format!("net references unknown table {tid}")))
    }

    /// The batch's lookups for a table, or an all-empty feature with the
    /// right instance count when the request carries none.
    fn feature_or_empty(&self, batch: &Batch, meta: &TableMeta, net: &Net) -> BatchFeature {
        if let Some(f) = batch.feature(meta.table_id) {
            return f.clone();
        }
        let instances = if net.role == NetRole::User { 1 } else { batch.len() };
        BatchFeature { table_id: meta.table_id, lengths: vec![0; instances], indices: Vec::new() }
    }
}

fn model_to_engine(e: ModelError) -> EngineError {
    match e {
        ModelError::IndexOutOfRange { table_id, index, num_rows } => EngineError::IndexOutOfRange { table_id, index, num_rows },
        other => EngineError::Model(other),
    }
}

/// Pooled output of one table for a batch: `instances` vectors of
/// `width` floats.
struct Pooled {
    table_id: TableId,
    instances: usize,
    width: usize,
    values: Vec<f32>,
}

impl Pooled {
    fn zeros(meta: &TableMeta, feature: &BatchFeature) -> Result<Self, EngineError> {
        if let Pooling::Concat { width } = meta.pooling {
            if let Some(bad) = feature.lengths.iter().find(|&&n| n != width) {
                return Err(EngineError::InvalidRequest(format!(
                    "concat table {} needs exactly {width} lookups per instance, got {bad}",
                    meta.table_id
                )));
            }
        }
        let width = meta.pooled_width();
        Ok(Pooled { table_id: meta.table_id, instances: feature.instances(), width, values: vec![0.0; width * feature.instances()] })
    }

    fn instance(&self, i: usize) -> &[f32] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    fn instance_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.values[i * self.width..(i + 1) * self.width]
    }

    /// Add a partition's partial sums (or copy a concat result).
    fn accumulate(&mut self, partial: &PartialEntry, shard: ShardId) -> Result<(), EngineError> {
        let bad = |msg: String| EngineError::RemoteExecution { shard, message: msg };
        if partial.item_lens.len() != self.instances {
            return Err(bad(format!(
                "table {} partial has {} instances, expected {}",
                self.table_id,
                partial.item_lens.len(),
                self.instances
            )));
        }
        if partial.values.len() != self.values.len() || partial.item_lens.iter().any(|&l| l as usize != self.width) {
            return Err(bad(format!("table {} partial has the wrong width", self.table_id)));
        }
        for (o, v) in self.values.iter_mut().zip(&partial.values) {
            *o += *v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
