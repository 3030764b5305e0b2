use std::collections::{BTreeMap, HashMap};

use super::{network_latency, percentile, AnalyzeError};
use crate::replay::Provenance;
use crate::trace::{Layer, RequestTrace, ShardTag, TraceEvent};

pub const STACK_LAYERS: [&str; 5] = ["dense_ops", "embedded_portion", "rpc_serde", "rpc_service", "net_overhead"];

/// Five-way split of one request's E2E latency, in ns.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LayerStack {
    pub dense_ops: f64,
    pub embedded_portion: f64,
    pub rpc_serde: f64,
    pub rpc_service: f64,
    pub net_overhead: f64,
}

impl LayerStack {
    pub fn to_array(self) -> [f64; 5] {
        [self.dense_ops, self.embedded_portion, self.rpc_serde, self.rpc_service, self.net_overhead]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        LayerStack { dense_ops: a[0], embedded_portion: a[1], rpc_serde: a[2], rpc_service: a[3], net_overhead: a[4] }
    }

    pub fn total(self) -> f64 {
        self.to_array().iter().sum()
    }
}

/// The slowest RPC op of one wait envelope and how its time splits on the
/// sparse shard.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundingOp {
    pub net: Option<u32>,
    pub batch: Option<u32>,
    pub shard: u32,
    pub op_wait_ns: u64,
    pub remote_e2e_ns: u64,
    pub network_ns: u64,
    pub remote_serde_ns: u64,
    pub remote_sparse_ops_ns: u64,
    pub remote_net_overhead_ns: u64,
    pub remote_service_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestAttribution {
    pub request_id: u64,
    pub trace_id: u128,
    pub e2e_ns: u64,
    pub stack: LayerStack,
    /// One per wait envelope on the bounding worker, in start order.
    pub bounding: Vec<BoundingOp>,
    /// Every RPC op span in the request.
    pub rpc_ops: u32,
    /// RPC ops keyed by (net, batch).
    pub rpc_ops_by_batch: BTreeMap<(u32, u32), u32>,
    pub sparse_shards: Vec<u32>,
    pub cpu_ns: BTreeMap<ShardTag, u64>,
    /// Network estimates over all ops of the request that came out negative.
    pub negative_network: u32,
}

fn malformed(trace: &RequestTrace, message: impl Into<String>) -> AnalyzeError {
    AnalyzeError::MalformedTrace { request_id: trace.request_id, message: message.into() }
}

/// CPU time per shard. A span's CPU counts once, on the outermost span of
/// its execution context, so nested spans are not double counted.
pub fn cpu_by_shard(trace: &RequestTrace) -> BTreeMap<ShardTag, u64> {
    let by_id: HashMap<u64, &TraceEvent> = trace.events.iter().map(|e| (e.span_id, e)).collect();
    let mut out = BTreeMap::new();
    for e in &trace.events {
        let outermost = match by_id.get(&e.parent_span_id) {
            Some(p) => p.shard != e.shard || p.attrs.ctx != e.attrs.ctx,
            None => true,
        };
        if outermost {
            *out.entry(e.shard).or_insert(0) += e.cpu_ns;
        }
    }
    out
}

fn remote_breakdown(trace: &RequestTrace, op: &TraceEvent) -> Option<BoundingOp> {
    let serve = trace.child_named(op.span_id, "serve_lookup").next()?;
    let mut serde = 0;
    let mut net_total = 0;
    let mut ops = 0;
    for c in trace.children(serve.span_id) {
        match c.layer {
            Layer::RpcSerde => serde += c.dur_ns,
            Layer::NetOverhead => {
                net_total += c.dur_ns;
                ops += trace.descendants(c.span_id).iter().filter(|d| d.layer == Layer::SparseOp).map(|d| d.dur_ns).sum::<u64>();
            }
            _ => {}
        }
    }
    let (network_ns, _) = network_latency(op.dur_ns, serve.dur_ns);
    Some(BoundingOp {
        net: op.attrs.net,
        batch: op.attrs.batch,
        shard: op.attrs.peer.or(match serve.shard {
            ShardTag::Sparse(s) => Some(s),
            ShardTag::Main => None,
        })?,
        op_wait_ns: op.dur_ns,
        remote_e2e_ns: serve.dur_ns,
        network_ns,
        remote_serde_ns: serde,
        remote_sparse_ops_ns: ops,
        remote_net_overhead_ns: net_total.saturating_sub(ops),
        remote_service_ns: serve.dur_ns.saturating_sub(serde + net_total),
    })
}

/// Split a request's E2E latency into the five layers.
///
/// Batches run on parallel workers; the worker with the most batch time
/// bounds the request and its batches are the ones attributed. Inside a
/// wait envelope the bounding op is the one with the longest sparse-shard
/// E2E, ties to the lowest shard id.
pub fn attribute_request(trace: &RequestTrace) -> Result<RequestAttribution, AnalyzeError> {
    let root = trace.root();
    if root.name != "request" || root.layer != Layer::RpcService {
        return Err(malformed(trace, format!("root span is {}:{}", root.layer, root.name)));
    }
    let e2e = root.dur_ns;
    let mut top_serde = 0u64;
    let mut workers: BTreeMap<u64, Vec<&TraceEvent>> = BTreeMap::new();
    for c in trace.children(root.span_id).filter(|c| c.shard == ShardTag::Main) {
        match (c.layer, c.name.as_ref()) {
            (Layer::RpcSerde, _) => top_serde += c.dur_ns,
            (Layer::NetOverhead, "batch") => workers.entry(c.attrs.ctx).or_default().push(c),
            _ => {}
        }
    }
    let worker_total = |bs: &[&TraceEvent]| bs.iter().map(|b| b.dur_ns).sum::<u64>();
    let mut batches: &[&TraceEvent] = &[];
    for v in workers.values() {
        if batches.is_empty() || worker_total(v) > worker_total(batches) {
            batches = v;
        }
    }
    let batch_total = worker_total(batches);

    let (mut dense, mut embedded, mut serde) = (0u64, 0u64, top_serde);
    let mut bounding = Vec::new();
    for b in batches {
        for d in trace.descendants(b.span_id).into_iter().filter(|d| d.shard == ShardTag::Main) {
            match (d.layer, d.name.as_ref()) {
                (Layer::DenseOp, _) => dense += d.dur_ns,
                (Layer::SparseOp, _) => embedded += d.dur_ns,
                (Layer::RpcSerde, _) => serde += d.dur_ns,
                (Layer::RpcWait, "rpc_wait") => {
                    embedded += d.dur_ns;
                    let ops: Vec<BoundingOp> =
                        trace.child_named(d.span_id, "rpc_op").filter_map(|op| remote_breakdown(trace, op)).collect();
                    if let Some(best) =
                        ops.into_iter().reduce(|a, b| if (b.remote_e2e_ns, std::cmp::Reverse(b.shard)) > (a.remote_e2e_ns, std::cmp::Reverse(a.shard)) { b } else { a })
                    {
                        bounding.push((d.start_ns, best));
                    }
                }
                _ => {}
            }
        }
    }
    bounding.sort_by_key(|(start, op)| (*start, op.shard));
    let in_batch = (dense + embedded + serde - top_serde) as f64;
    let stack = LayerStack {
        dense_ops: dense as f64,
        embedded_portion: embedded as f64,
        rpc_serde: serde as f64,
        rpc_service: e2e as f64 - top_serde as f64 - batch_total as f64,
        net_overhead: batch_total as f64 - in_batch,
    };
    let slack = 0.01 * e2e as f64;
    for (name, v) in STACK_LAYERS.iter().zip(stack.to_array()) {
        if v < -slack {
            return Err(malformed(trace, format!("{name} comes out at {v} ns of a {e2e} ns request")));
        }
    }

    let mut rpc_ops = 0;
    let mut rpc_ops_by_batch = BTreeMap::new();
    let mut negative_network = 0;
    for op in trace.events.iter().filter(|e| e.shard == ShardTag::Main && e.name == "rpc_op") {
        rpc_ops += 1;
        *rpc_ops_by_batch.entry((op.attrs.net.unwrap_or(0), op.attrs.batch.unwrap_or(0))).or_insert(0) += 1;
        if let Some(serve) = trace.child_named(op.span_id, "serve_lookup").next() {
            negative_network += network_latency(op.dur_ns, serve.dur_ns).1 as u32;
        }
    }
    Ok(RequestAttribution {
        request_id: trace.request_id,
        trace_id: trace.trace_id,
        e2e_ns: e2e,
        stack: LayerStack::from_array(stack.to_array().map(|v| v.max(0.0))),
        bounding: bounding.into_iter().map(|(_, b)| b).collect(),
        rpc_ops,
        rpc_ops_by_batch,
        sparse_shards: trace.sparse_shards_contacted(),
        cpu_ns: cpu_by_shard(trace),
        negative_network,
    })
}

/// Attribution of a whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionReport {
    pub requests: Vec<RequestAttribution>,
}

impl AttributionReport {
    pub fn e2e_ns(&self) -> Vec<f64> {
        self.requests.iter().map(|r| r.e2e_ns as f64).collect()
    }

    pub fn e2e_percentile(&self, p: f64) -> Result<f64, AnalyzeError> {
        percentile(&self.e2e_ns(), p)
    }

    /// Percentile of one stack component taken across requests on its own.
    pub fn component_percentile(&self, layer: usize, p: f64) -> Result<f64, AnalyzeError> {
        let v: Vec<f64> = self.requests.iter().map(|r| r.stack.to_array()[layer]).collect();
        percentile(&v, p)
    }

    /// The stack of the request sitting at the nearest-rank E2E percentile,
    /// so components still add up to that request's E2E.
    pub fn stack_at(&self, p: f64) -> Result<&RequestAttribution, AnalyzeError> {
        let target = self.e2e_percentile(p)?;
        self.requests
            .iter()
            .filter(|r| r.e2e_ns as f64 == target)
            .min_by_key(|r| r.request_id)
            .ok_or(AnalyzeError::EmptyInput)
    }

    pub fn cpu_ns(&self) -> BTreeMap<ShardTag, u64> {
        let mut out = BTreeMap::new();
        for r in &self.requests {
            for (s, c) in &r.cpu_ns {
                *out.entry(*s).or_insert(0) += c;
            }
        }
        out
    }

    pub fn total_cpu_ns(&self) -> u64 {
        self.cpu_ns().values().sum()
    }

    pub fn rpc_ops(&self) -> u64 {
        self.requests.iter().map(|r| r.rpc_ops as u64).sum()
    }

    pub fn mean_rpc_ops(&self) -> f64 {
        self.rpc_ops() as f64 / self.requests.len().max(1) as f64
    }

    /// Network estimates of every bounding op in the run.
    pub fn network_ns(&self) -> Vec<f64> {
        self.requests.iter().flat_map(|r| &r.bounding).map(|b| b.network_ns as f64).collect()
    }

    pub fn negative_network(&self) -> u64 {
        self.requests.iter().map(|r| r.negative_network as u64).sum()
    }
}

impl AttributionReport {
    /// One row per request: E2E, the five layers, RPC ops, shards contacted
    /// and the summed network estimate of its bounding ops.
    pub fn write_csv(&self, w: impl std::io::Write, prov: &Provenance) -> Result<(), AnalyzeError> {
        let mut w = std::io::BufWriter::new(w);
        prov.write_comments(&mut w)?;
        let mut c = csv::Writer::from_writer(w);
        let mut header = vec!["request_id".to_string(), "trace_id".into(), "e2e_ns".into()];
        header.extend(STACK_LAYERS.iter().map(|l| format!("{l}_ns")));
        header.extend(["rpc_ops", "sparse_shards", "network_ns", "cpu_ns"].map(String::from));
        c.write_record(&header)?;
        for r in &self.requests {
            let mut row = vec![r.request_id.to_string(), format!("{:032x}", r.trace_id), r.e2e_ns.to_string()];
            row.extend(r.stack.to_array().iter().map(|v| format!("{v:.0}")));
            row.push(r.rpc_ops.to_string());
            row.push(r.sparse_shards.len().to_string());
            row.push(r.bounding.iter().map(|b| b.network_ns).sum::<u64>().to_string());
            row.push(r.cpu_ns.values().sum::<u64>().to_string());
            c.write_record(&row)?;
        }
        c.flush()?;
        Ok(())
    }
}

pub fn attribute_run(traces: &[RequestTrace]) -> Result<AttributionReport, AnalyzeError> {
    if traces.is_empty() {
        return Err(AnalyzeError::EmptyInput);
    }
    let requests = traces.iter().map(attribute_request).collect::<Result<Vec<_>, _>>()?;
    Ok(AttributionReport { requests })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Attrs;
    use std::borrow::Cow;

    struct Builder {
        events: Vec<TraceEvent>,
        next: u64,
    }

    impl Builder {
        fn new() -> Self {
            Builder { events: Vec::new(), next: 1 }
        }

        #[allow(clippy::too_many_arguments)]
        fn add(&mut self, parent: u64, shard: ShardTag, layer: Layer, name: &'static str, start: u64, dur: u64, attrs: Attrs) -> u64 {
            let id = self.next;
            self.next += 1;
            self.events.push(TraceEvent {
                trace_id: 9,
                span_id: id,
                parent_span_id: parent,
                request_id: 4,
                shard,
                layer,
                name: Cow::Borrowed(name),
                start_ns: start,
                dur_ns: dur,
                cpu_ns: dur / 2,
                attrs,
            });
            id
        }

        fn build(self) -> RequestTrace {
            RequestTrace::new(self.events).unwrap()
        }
    }

    const M: ShardTag = ShardTag::Main;

    fn on(ctx: u64) -> Attrs {
        Attrs { ctx, ..Attrs::default() }
    }

    #[test]
    fn singular_stack() {
        let mut b = Builder::new();
        let a = on(1);
        let root = b.add(0, M, Layer::RpcService, "request", 0, 1000, a);
        b.add(root, M, Layer::RpcSerde, "deserialize_request", 0, 50, a);
        let batch = b.add(root, M, Layer::NetOverhead, "batch", 60, 800, a);
        let net = b.add(batch, M, Layer::NetOverhead, "net", 60, 800, a);
        b.add(net, M, Layer::SparseOp, "sls", 60, 200, a);
        b.add(net, M, Layer::SparseOp, "sls", 260, 100, a);
        b.add(net, M, Layer::DenseOp, "fc", 400, 300, a);
        b.add(root, M, Layer::RpcSerde, "serialize_response", 900, 40, a);
        let r = attribute_request(&b.build()).unwrap();
        assert_eq!(r.stack, LayerStack { dense_ops: 300.0, embedded_portion: 300.0, rpc_serde: 90.0, rpc_service: 110.0, net_overhead: 200.0 });
        assert_eq!(r.stack.total(), 1000.0);
        assert_eq!(r.rpc_ops, 0);
        assert!(r.bounding.is_empty());
        // Everything ran on one context: only the root's CPU counts.
        assert_eq!(r.cpu_ns[&M], 500);
    }

    fn two_shard_trace(dur_a: u64, dur_b: u64) -> RequestTrace {
        let mut b = Builder::new();
        let a = on(1);
        let root = b.add(0, M, Layer::RpcService, "request", 0, 10_000, a);
        let batch = b.add(root, M, Layer::NetOverhead, "batch", 0, 9_000, a.batch(0));
        let net = b.add(batch, M, Layer::NetOverhead, "net", 0, 9_000, a.net(0).batch(0));
        b.add(net, M, Layer::RpcSerde, "serialize_lookup", 0, 100, a);
        let wait = b.add(net, M, Layer::RpcWait, "rpc_wait", 100, 8_000, a);
        for (shard, dur) in [(0u32, dur_a), (1, dur_b)] {
            let op = b.add(wait, M, Layer::RpcWait, "rpc_op", 100, dur + 1_000, a.peer(shard).net(0).batch(0));
            let s = ShardTag::Sparse(shard);
            let sa = on(10 + shard as u64);
            // Remote clocks are deliberately far off.
            let base = 1_000_000_000 * (shard as u64 + 1);
            let serve = b.add(op, s, Layer::RpcService, "serve_lookup", base, dur, sa);
            b.add(serve, s, Layer::RpcSerde, "deserialize_lookup", base, 10, sa);
            let sn = b.add(serve, s, Layer::NetOverhead, "sparse_net", base + 10, dur - 30, sa);
            b.add(sn, s, Layer::SparseOp, "sls", base + 10, dur - 50, sa);
            b.add(serve, s, Layer::RpcSerde, "serialize_response", base + dur - 20, 15, sa);
        }
        b.build()
    }

    #[test]
    fn slowest_remote_bounds() {
        let r = attribute_request(&two_shard_trace(2_000, 5_000)).unwrap();
        assert_eq!(r.bounding.len(), 1);
        let op = &r.bounding[0];
        assert_eq!(op.shard, 1);
        assert_eq!(op.remote_e2e_ns, 5_000);
        assert_eq!(op.network_ns, 1_000);
        assert_eq!(op.remote_serde_ns, 25);
        assert_eq!(op.remote_sparse_ops_ns, 4_950);
        assert_eq!(op.remote_net_overhead_ns, 20);
        assert_eq!(op.remote_service_ns, 5);
        assert_eq!(r.rpc_ops, 2);
        assert_eq!(r.rpc_ops_by_batch[&(0, 0)], 2);
        assert_eq!(r.sparse_shards, vec![0, 1]);
        assert_eq!(r.stack.embedded_portion, 8_000.0);
        assert_eq!(r.stack.total(), 10_000.0);

        let swapped = attribute_request(&two_shard_trace(5_000, 2_000)).unwrap();
        assert_eq!(swapped.bounding[0].shard, 0);
        let tie = attribute_request(&two_shard_trace(3_000, 3_000)).unwrap();
        assert_eq!(tie.bounding[0].shard, 0);
    }

    #[test]
    fn overfull_batch_is_malformed() {
        let mut b = Builder::new();
        let a = Attrs::default();
        let root = b.add(0, M, Layer::RpcService, "request", 0, 1000, a);
        b.add(root, M, Layer::NetOverhead, "batch", 0, 2000, a);
        assert!(matches!(attribute_request(&b.build()), Err(AnalyzeError::MalformedTrace { .. })));
    }

    #[test]
    fn parallel_workers_use_the_longest() {
        let mut b = Builder::new();
        let root = b.add(0, M, Layer::RpcService, "request", 0, 1000, on(1));
        for (ctx, start, dur, dense) in [(2u64, 0u64, 400u64, 100u64), (2, 400, 400, 100), (3, 0, 700, 600)] {
            let a = on(ctx);
            let batch = b.add(root, M, Layer::NetOverhead, "batch", start, dur, a);
            b.add(batch, M, Layer::DenseOp, "fc", start, dense, a);
        }
        let r = attribute_request(&b.build()).unwrap();
        assert_eq!(r.stack.dense_ops, 200.0);
        assert_eq!(r.stack.net_overhead, 600.0);
        assert_eq!(r.stack.rpc_service, 200.0);
    }
}
