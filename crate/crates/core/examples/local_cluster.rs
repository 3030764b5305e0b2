//! Serve a sharded model in-process and rank one request against it.

use shardrec::cluster::{ClusterConfig, LocalCluster};
use shardrec::engine::BatchSize;
use shardrec::model::{generate_model, Archetype, SizeBudget};
use shardrec::planner::plan_load_balanced;
use shardrec::replay::{generate_requests, WorkloadProfile};
use shardrec::transport::MainClient;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = generate_model(Archetype::LongTailSmall, SizeBudget::mib(4), 1)?;
    let h = spec.header();
    let plan = plan_load_balanced(&h, &spec.profiles(), 3, None)?;
    let cluster = LocalCluster::start(&spec, plan, &ClusterConfig::new(BatchSize::fixed(16)).tracing(false))?;

    let req = generate_requests(&h, &WorkloadProfile::default(), 1)?.remove(0);
    let mut client = MainClient::connect(&cluster.endpoint())?;
    let resp = client.rank(&req)?;
    println!("request {} ({} candidates) via {}", resp.request_id, req.candidates.len(), cluster.endpoint());
    for (i, s) in resp.scores.iter().take(8).enumerate() {
        println!("  candidate {i}: {s:.5}");
    }
    cluster.shutdown();
    Ok(())
}
