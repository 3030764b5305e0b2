//! Drive a cluster with an open-loop workload and report tail latency.

use shardrec::analyze::p50_p90_p99;
use shardrec::cluster::{ClusterConfig, LocalCluster};
use shardrec::engine::BatchSize;
use shardrec::model::{generate_model, Archetype, SizeBudget};
use shardrec::planner::plan_nsbp;
use shardrec::replay::{generate_requests, replay, Provenance, ReplayOptions, WorkloadProfile};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = generate_model(Archetype::LongTail, SizeBudget::mib(4), 3)?;
    let h = spec.header();
    let plan = plan_nsbp(&h, &spec.profiles(), 4, None)?;
    let prov = Provenance {
        seed: 3,
        model_id: h.model_id.clone(),
        plan_hash: plan.plan_hash(),
        strategy: plan.strategy.to_string(),
        shards: plan.num_sparse_shards,
        batch_size: "16".into(),
    };
    let cluster = LocalCluster::start(&spec, plan, &ClusterConfig::new(BatchSize::fixed(16)).tracing(false))?;

    let reqs = generate_requests(&h, &WorkloadProfile { seed: 3, ..WorkloadProfile::default() }, 200)?;
    let log = replay(&reqs, &cluster.endpoint(), &ReplayOptions::open_loop(50.0), prov)?;
    cluster.shutdown();

    let [p50, p90, p99] = p50_p90_p99(&log.latencies_ns())?;
    println!("{} ok, {} failed, {:.1} qps", log.ok_count(), log.failed_count(), log.achieved_qps().unwrap_or(0.0));
    println!("latency ms: p50 {:.2}  p90 {:.2}  p99 {:.2}", p50 / 1e6, p90 / 1e6, p99 / 1e6);
    let out = std::env::temp_dir().join("shardrec-replay.csv");
    log.save(&out)?;
    println!("run log -> {}", out.display());
    Ok(())
}
