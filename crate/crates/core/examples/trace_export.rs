//! Trace a few requests across shards and export one as a Chrome trace.

use std::time::Duration;

use shardrec::cluster::{ClusterConfig, LocalCluster};
use shardrec::engine::BatchSize;
use shardrec::model::{generate_model, Archetype, SizeBudget};
use shardrec::planner::plan_capacity_balanced;
use shardrec::replay::{generate_requests, replay, Provenance, ReplayOptions, WorkloadProfile};
use shardrec::trace::{export_chrome_trace, merge_traces};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = generate_model(Archetype::LongTail, SizeBudget::mib(4), 5)?;
    let h = spec.header();
    let plan = plan_capacity_balanced(&h, &spec.profiles(), 2, None)?;
    let cfg = ClusterConfig::new(BatchSize::fixed(16)).injected_rpc_delay(Duration::from_millis(1));
    let cluster = LocalCluster::start(&spec, plan, &cfg)?;

    let reqs = generate_requests(&h, &WorkloadProfile::default(), 10)?;
    replay(&reqs, &cluster.endpoint(), &ReplayOptions::serial(), Provenance::default())?;
    // Let the recorders hand over the last spans.
    std::thread::sleep(Duration::from_millis(50));
    let merged = merge_traces(&cluster.collect_traces());
    cluster.shutdown();

    let t = &merged.traces[0];
    println!("request {}: {} spans on shards {:?}", t.request_id, t.events.len(), t.sparse_shards_contacted());
    let chrome = export_chrome_trace(std::slice::from_ref(t));
    let out = std::env::temp_dir().join("shardrec-trace.json");
    std::fs::write(&out, chrome.to_json())?;
    println!("{} lanes -> {} (open in chrome://tracing or Perfetto)", chrome.lanes(), out.display());
    Ok(())
}
