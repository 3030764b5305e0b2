//! Chrome trace-event export: one process lane per shard, loadable in
//! chrome://tracing or Perfetto.
//!
//! Main-shard spans keep their offsets from the first exported root. A
//! remote subtree is placed inside its parent RPC span, centred so the
//! unexplained wait splits evenly between request and response legs;
//! absolute clocks of different hosts are never compared.

use std::collections::HashMap;

use serde::Serialize;

use super::{RequestTrace, ShardTag, TraceEvent};

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ChromeEvent {
    pub name: String,
    pub cat: String,
    pub ph: &'static str,
    /// Microseconds.
    pub ts: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dur: Option<f64>,
    pub pid: u32,
    pub tid: u64,
    pub args: HashMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ChromeTrace {
    #[serde(rename = "traceEvents")]
    pub trace_events: Vec<ChromeEvent>,
    #[serde(rename = "displayTimeUnit")]
    pub display_time_unit: &'static str,
}

impl ChromeTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace events serialize")
    }

    /// Distinct shard lanes carrying spans.
    pub fn lanes(&self) -> usize {
        let mut pids: Vec<u32> = self.trace_events.iter().filter(|e| e.ph == "X").map(|e| e.pid).collect();
        pids.sort();
        pids.dedup();
        pids.len()
    }
}

fn pid(shard: ShardTag) -> u32 {
    match shard {
        ShardTag::Main => 0,
        ShardTag::Sparse(s) => s + 1,
    }
}

fn span_event(e: &TraceEvent, ts_ns: i128) -> ChromeEvent {
    let mut args = HashMap::new();
    args.insert("request_id".into(), e.request_id.into());
    args.insert("cpu_ns".into(), e.cpu_ns.into());
    args.insert("span_id".into(), format!("{:016x}", e.span_id).into());
    for (k, v) in [("net", e.attrs.net), ("batch", e.attrs.batch), ("peer", e.attrs.peer), ("table", e.attrs.table), ("layer", e.attrs.layer)] {
        if let Some(v) = v {
            args.insert(k.into(), v.into());
        }
    }
    ChromeEvent {
        name: e.name.to_string(),
        cat: e.layer.to_string(),
        ph: "X",
        ts: ts_ns as f64 / 1000.0,
        dur: Some(e.dur_ns as f64 / 1000.0),
        pid: pid(e.shard),
        tid: e.attrs.ctx,
        args,
    }
}

pub fn export_chrome_trace(traces: &[RequestTrace]) -> ChromeTrace {
    let mut out = Vec::new();
    let mut lanes: Vec<ShardTag> = traces.iter().flat_map(|t| t.shards()).collect();
    lanes.sort();
    lanes.dedup();
    for shard in &lanes {
        let mut args = HashMap::new();
        args.insert("name".to_string(), serde_json::Value::from(shard.to_string()));
        out.push(ChromeEvent {
            name: "process_name".into(),
            cat: "__metadata".into(),
            ph: "M",
            ts: 0.0,
            dur: None,
            pid: pid(*shard),
            tid: 0,
            args,
        });
    }
    let origin = traces.iter().map(|t| t.root().start_ns).min().unwrap_or(0) as i128;
    for t in traces {
        let by_id: HashMap<u64, &TraceEvent> = t.events.iter().map(|e| (e.span_id, e)).collect();
        // Offset (in main-host ns relative to origin) for the start of each
        // span; remote spans resolve through their host's entry span.
        let mut remote_base: HashMap<u64, i128> = HashMap::new();
        for e in &t.events {
            if e.shard == ShardTag::Main {
                out.push(span_event(e, e.start_ns as i128 - origin));
                continue;
            }
            let mut entry = e;
            while let Some(p) = by_id.get(&entry.parent_span_id) {
                if p.shard != e.shard {
                    break;
                }
                entry = p;
            }
            let base = *remote_base.entry(entry.span_id).or_insert_with(|| match by_id.get(&entry.parent_span_id) {
                Some(caller) => {
                    let slack = caller.dur_ns as i128 - entry.dur_ns as i128;
                    caller.start_ns as i128 - origin + slack.max(0) / 2
                }
                None => 0,
            });
            out.push(span_event(e, base + e.start_ns as i128 - entry.start_ns as i128));
        }
    }
    ChromeTrace { trace_events: out, display_time_unit: "ms" }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Attrs, Layer};

    fn ev(span: u64, parent: u64, shard: ShardTag, start: u64, dur: u64) -> TraceEvent {
        TraceEvent {
            trace_id: 7,
            span_id: span,
            parent_span_id: parent,
            request_id: 1,
            shard,
            layer: Layer::RpcService,
            name: format!("e{span}").into(),
            start_ns: start,
            dur_ns: dur,
            cpu_ns: 0,
            attrs: Attrs::default(),
        }
    }

    #[test]
    fn remote_spans_centred_in_caller() {
        // Remote clock is wildly skewed; placement uses durations only.
        let t = RequestTrace::new(vec![
            ev(1, 0, ShardTag::Main, 1_000_000, 100_000),
            ev(2, 1, ShardTag::Main, 1_010_000, 50_000),
            ev(3, 2, ShardTag::Sparse(0), 9_000_000_000, 30_000),
            ev(4, 3, ShardTag::Sparse(0), 9_000_005_000, 10_000),
        ])
        .unwrap();
        let x = export_chrome_trace(&[t]);
        let get = |n: &str| x.trace_events.iter().find(|e| e.name == n).unwrap();
        assert_eq!(get("e1").ts, 0.0);
        assert_eq!(get("e2").ts, 10.0);
        assert_eq!(get("e3").ts, 20.0);
        assert_eq!(get("e4").ts, 25.0);
        assert_eq!(x.lanes(), 2);
        for e in x.trace_events.iter().filter(|e| e.ph == "X") {
            assert!(e.dur.unwrap() > 0.0);
        }
        let v: serde_json::Value = serde_json::from_str(&x.to_json()).unwrap();
        assert!(v["traceEvents"].as_array().unwrap().len() >= 6);
    }

    #[test]
    fn singular_is_one_lane() {
        let t = RequestTrace::new(vec![ev(1, 0, ShardTag::Main, 0, 10), ev(2, 1, ShardTag::Main, 1, 5)]).unwrap();
        assert_eq!(export_chrome_trace(&[t]).lanes(), 1);
    }
}
