use std::collections::{BTreeMap, HashMap, HashSet};

use super::{Layer, ShardTag, TraceEvent, TraceFile};

/// All spans of one request across shards, linked by parent span id.
#[derive(Debug, Clone)]
pub struct RequestTrace {
    pub trace_id: u128,
    pub request_id: u64,
    /// Sorted by (shard, start, span id); the root is `events[root]`.
    pub events: Vec<TraceEvent>,
    root: usize,
    children: HashMap<u64, Vec<usize>>,
}

impl PartialEq for RequestTrace {
    fn eq(&self, other: &Self) -> bool {
        self.trace_id == other.trace_id && self.events == other.events
    }
}

impl RequestTrace {
    /// Build from the events of one trace id. Fails when there is not
    /// exactly one main-shard root.
    pub fn new(mut events: Vec<TraceEvent>) -> Result<Self, Vec<TraceEvent>> {
        events.sort_by(|a, b| (a.shard, a.start_ns, a.span_id).cmp(&(b.shard, b.start_ns, b.span_id)));
        let roots: Vec<usize> = events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_root() && e.shard == ShardTag::Main)
            .map(|(i, _)| i)
            .collect();
        if roots.len() != 1 {
            return Err(events);
        }
        let root = roots[0];
        let mut children: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, e) in events.iter().enumerate() {
            if !e.is_root() {
                children.entry(e.parent_span_id).or_default().push(i);
            }
        }
        Ok(RequestTrace { trace_id: events[root].trace_id, request_id: events[root].request_id, events, root, children })
    }

    pub fn root(&self) -> &TraceEvent {
        &self.events[self.root]
    }

    pub fn children(&self, span_id: u64) -> impl Iterator<Item = &TraceEvent> {
        self.children.get(&span_id).into_iter().flatten().map(|&i| &self.events[i])
    }

    pub fn child_named<'a>(&'a self, span_id: u64, name: &'a str) -> impl Iterator<Item = &'a TraceEvent> {
        self.children(span_id).filter(move |e| e.name == name)
    }

    /// Every event in the subtree under `span_id`, excluding itself.
    pub fn descendants(&self, span_id: u64) -> Vec<&TraceEvent> {
        let mut out = Vec::new();
        let mut stack = vec![span_id];
        while let Some(id) = stack.pop() {
            for c in self.children(id) {
                out.push(c);
                stack.push(c.span_id);
            }
        }
        out
    }

    pub fn shards(&self) -> Vec<ShardTag> {
        let mut s: Vec<ShardTag> = self.events.iter().map(|e| e.shard).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn on_shard(&self, shard: ShardTag) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.shard == shard)
    }

    pub fn by_layer(&self, layer: Layer) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.layer == layer)
    }

    /// Sparse shards that served at least one lookup for this request.
    pub fn sparse_shards_contacted(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self
            .events
            .iter()
            .filter_map(|e| match e.shard {
                ShardTag::Sparse(id) if e.name == "serve_lookup" => Some(id),
                _ => None,
            })
            .collect();
        s.sort();
        s.dedup();
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct MergeReport {
    /// Ordered by request id, then trace id.
    pub traces: Vec<RequestTrace>,
    /// Spans whose parent was not found, or whose trace has no single root.
    pub orphans: Vec<TraceEvent>,
    /// Corrupt records skipped while reading the input files.
    pub corrupt_records: usize,
}

/// Group per-shard events into request traces. The result does not depend
/// on the order of `files`.
pub fn merge_traces(files: &[TraceFile]) -> MergeReport {
    let mut by_trace: BTreeMap<u128, Vec<TraceEvent>> = BTreeMap::new();
    let mut corrupt = 0;
    for f in files {
        corrupt += f.corrupt.len();
        for e in &f.events {
            by_trace.entry(e.trace_id).or_default().push(e.clone());
        }
    }
    let mut traces = Vec::new();
    let mut orphans = Vec::new();
    for (_, events) in by_trace {
        match RequestTrace::new(events) {
            Ok(t) => {
                let ids: HashSet<u64> = t.events.iter().map(|e| e.span_id).collect();
                let (linked, lost): (Vec<TraceEvent>, Vec<TraceEvent>) = t
                    .events
                    .iter()
                    .cloned()
                    .partition(|e| e.is_root() || ids.contains(&e.parent_span_id));
                if lost.is_empty() {
                    traces.push(t);
                } else {
                    orphans.extend(lost);
                    traces.push(RequestTrace::new(linked).expect("root kept"));
                }
            }
            Err(events) => orphans.extend(events),
        }
    }
    traces.sort_by_key(|t| (t.request_id, t.trace_id));
    orphans.sort_by(|a, b| (a.trace_id, a.shard, a.start_ns, a.span_id).cmp(&(b.trace_id, b.shard, b.start_ns, b.span_id)));
    MergeReport { traces, orphans, corrupt_records: corrupt }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Attrs;

    fn ev(trace: u128, span: u64, parent: u64, shard: ShardTag, start: u64) -> TraceEvent {
        TraceEvent {
            trace_id: trace,
            span_id: span,
            parent_span_id: parent,
            request_id: trace as u64,
            shard,
            layer: Layer::RpcService,
            name: "x".into(),
            start_ns: start,
            dur_ns: 10,
            cpu_ns: 0,
            attrs: Attrs::default(),
        }
    }

    fn files() -> Vec<TraceFile> {
        let mut main = Vec::new();
        let mut s0 = Vec::new();
        let mut s1 = Vec::new();
        for t in 1..=5u128 {
            let base = t as u64 * 1000;
            main.push(ev(t, base + 1, 0, ShardTag::Main, 0));
            main.push(ev(t, base + 2, base + 1, ShardTag::Main, 1));
            s0.push(ev(t, base + 3, base + 2, ShardTag::Sparse(0), 500));
            s1.push(ev(t, base + 4, base + 2, ShardTag::Sparse(1), 9));
        }
        [(ShardTag::Main, main), (ShardTag::Sparse(0), s0), (ShardTag::Sparse(1), s1)]
            .into_iter()
            .map(|(shard, events)| TraceFile { shard, events, corrupt: vec![] })
            .collect()
    }

    #[test]
    fn one_root_per_request() {
        let r = merge_traces(&files());
        assert_eq!(r.traces.len(), 5);
        assert!(r.orphans.is_empty());
        for t in &r.traces {
            assert!(t.root().is_root());
            let ids: HashSet<u64> = t.on_shard(ShardTag::Main).map(|e| e.span_id).collect();
            for e in t.events.iter().filter(|e| e.shard != ShardTag::Main) {
                assert!(ids.contains(&e.parent_span_id));
            }
        }
    }

    #[test]
    fn shuffled_files_merge_identically() {
        let f = files();
        let mut g = f.clone();
        g.reverse();
        for file in &mut g {
            file.events.reverse();
        }
        assert_eq!(merge_traces(&f).traces, merge_traces(&g).traces);
    }

    #[test]
    fn withheld_main_file_orphans_everything() {
        let f: Vec<TraceFile> = files().into_iter().filter(|f| f.shard != ShardTag::Main).collect();
        let r = merge_traces(&f);
        assert!(r.traces.is_empty());
        assert_eq!(r.orphans.len(), 10);
    }
}
