//! Attribute latency and CPU for a sharded run and compare it with the
//! unsharded baseline.

use std::time::Duration;

use shardrec::analyze::{attribute_run, compare_runs, RunSummary};
use shardrec::cluster::{ClusterConfig, LocalCluster};
use shardrec::engine::BatchSize;
use shardrec::model::{generate_model, Archetype, ModelSpec, SizeBudget};
use shardrec::planner::{plan_load_balanced, plan_singular, ShardPlan};
use shardrec::replay::{generate_requests, replay, Provenance, ReplayOptions, WorkloadProfile};
use shardrec::request::RankingRequest;
use shardrec::trace::merge_traces;

fn run(label: &str, spec: &ModelSpec, plan: ShardPlan, reqs: &[RankingRequest]) -> Result<RunSummary, Box<dyn std::error::Error>> {
    let prov = Provenance {
        seed: 9,
        model_id: spec.model_id.clone(),
        plan_hash: plan.plan_hash(),
        strategy: plan.strategy.to_string(),
        shards: plan.num_sparse_shards,
        batch_size: "32".into(),
    };
    let cluster = LocalCluster::start(spec, plan, &ClusterConfig::new(BatchSize::fixed(32)))?;
    let log = replay(reqs, &cluster.endpoint(), &ReplayOptions::serial(), prov)?;
    std::thread::sleep(Duration::from_millis(50));
    let merged = merge_traces(&cluster.collect_traces());
    cluster.shutdown();
    Ok(RunSummary::new(label, &log, attribute_run(&merged.traces)?))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = generate_model(Archetype::LongTail, SizeBudget::mib(4), 9)?;
    let h = spec.header();
    let reqs = generate_requests(&h, &WorkloadProfile { seed: 9, ..WorkloadProfile::default() }, 60)?;

    let base = run("singular", &spec, plan_singular(&h), &reqs)?;
    let cand = run("lb-4", &spec, plan_load_balanced(&h, &spec.profiles(), 4, None)?, &reqs)?;

    let p50 = cand.attribution.stack_at(50.0)?;
    println!("lb-4 P50 request {}: {:?}", p50.request_id, p50.stack);
    let r = compare_runs(&base, &cand)?;
    println!("latency x{:.3} / x{:.3} / x{:.3} (p50/p90/p99)", r.latency_ratio[0], r.latency_ratio[1], r.latency_ratio[2]);
    println!("cpu x{:.3}, rpc ops {} -> {}", r.cpu_ratio, r.rpc_ops[0], r.rpc_ops[1]);
    r.write_csv(std::io::stdout(), &cand.provenance)?;
    Ok(())
}
