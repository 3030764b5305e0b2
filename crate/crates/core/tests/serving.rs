use std::collections::HashMap;
use std::time::{Duration, Instant};

use shardrec::cluster::{ClusterConfig, LocalCluster};
use shardrec::engine::{BatchSize, EngineConfig, LocalDispatch, MainEngine};
use shardrec::model::{generate_model, Archetype, ModelSpec, SizeBudget};
use shardrec::planner::{plan_load_balanced, plan_nsbp, plan_singular};
use shardrec::replay::{generate_requests, CountDist, WorkloadProfile};
use shardrec::request::RankingRequest;
use shardrec::trace::{merge_traces, Layer, ShardTag, SpanCtx, Tracer};
use shardrec::transport::MainClient;

fn model() -> ModelSpec {
    generate_model(Archetype::LongTail, SizeBudget::mib(2), 21).unwrap()
}

fn requests(spec: &ModelSpec, n: usize) -> Vec<RankingRequest> {
    let profile = WorkloadProfile { seed: 21, candidates: CountDist::Uniform { min: 1, max: 48 }, ..WorkloadProfile::default() };
    generate_requests(&spec.header(), &profile, n).unwrap()
}

fn singular_scores(spec: &ModelSpec, reqs: &[RankingRequest]) -> HashMap<u64, Vec<f32>> {
    let engine = MainEngine::from_spec(spec, plan_singular(&spec.header()), EngineConfig::new(BatchSize::fixed(16))).unwrap();
    let none = LocalDispatch::new(Vec::new());
    let tracer = Tracer::disabled(ShardTag::Main);
    let root = SpanCtx { trace_id: 0, span_id: 0, request_id: 0 };
    reqs.iter().map(|r| (r.request_id, engine.execute(r, &none, &tracer, root).unwrap())).collect()
}

fn close(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-5 * y.abs())
}

#[test]
fn sixty_four_in_flight_without_bleed() {
    let spec = model();
    let reqs = requests(&spec, 64);
    let want = singular_scores(&spec, &reqs);
    let plan = plan_load_balanced(&spec.header(), &spec.profiles(), 4, None).unwrap();
    let cluster = LocalCluster::start(&spec, plan, &ClusterConfig::new(BatchSize::fixed(16)).tracing(false)).unwrap();

    // Eight connections, eight pipelined requests each, all sent before any
    // response is read.
    let mut conns: Vec<_> = (0..8).map(|_| MainClient::connect(&cluster.endpoint()).unwrap().into_split()).collect();
    let mut sent: Vec<Vec<(u64, u128)>> = vec![Vec::new(); conns.len()];
    for (i, r) in reqs.iter().enumerate() {
        let c = i % conns.len();
        let trace = conns[c].0.send(r, 0).unwrap();
        sent[c].push((r.request_id, trace));
    }
    std::thread::scope(|s| {
        for ((_, rx), expect) in conns.iter_mut().zip(&sent) {
            let want = &want;
            s.spawn(move || {
                for &(id, trace) in expect {
                    let resp = rx.recv().unwrap();
                    assert_eq!(resp.request_id, id);
                    assert_eq!(resp.trace_id, trace);
                    assert!(close(&resp.scores, &want[&id]), "request {id} got another request's scores");
                }
            });
        }
    });
    cluster.shutdown();
}

#[test]
fn traces_propagate_ids_and_overlap_remote_work() {
    let spec = model();
    let reqs = requests(&spec, 20);
    let h = spec.header();
    let plan = plan_nsbp(&h, &spec.profiles(), 4, None).unwrap();
    let cfg = ClusterConfig::new(BatchSize::fixed(16)).injected_rpc_delay(Duration::from_millis(2));
    let cluster = LocalCluster::start(&spec, plan, &cfg).unwrap();
    let mut client = MainClient::connect(&cluster.endpoint()).unwrap();
    let mut traces = HashMap::new();
    for r in &reqs {
        let resp = client.rank(r).unwrap();
        traces.insert(resp.trace_id, r.request_id);
    }
    std::thread::sleep(Duration::from_millis(50));
    let merged = merge_traces(&cluster.collect_traces());
    cluster.shutdown();

    assert!(merged.orphans.is_empty());
    assert_eq!(merged.traces.len(), reqs.len());
    let mut overlapping = 0;
    for t in &merged.traces {
        assert_eq!(traces.get(&t.trace_id), Some(&t.request_id));
        for e in &t.events {
            assert_eq!(e.trace_id, t.trace_id);
            assert!(e.cpu_ns <= e.dur_ns, "{} on {} used {} cpu ns in {} ns", e.name, e.shard, e.cpu_ns, e.dur_ns);
        }
        // Calls of one envelope run concurrently: with a 2 ms delay on each,
        // their remote service spans overlap.
        for env in t.events.iter().filter(|e| e.name == "rpc_wait") {
            let remote: Vec<_> = t
                .child_named(env.span_id, "rpc_op")
                .flat_map(|op| t.child_named(op.span_id, "serve_lookup"))
                .collect();
            assert!(remote.iter().all(|e| e.layer == Layer::RpcService));
            if remote.len() >= 2 {
                let latest_start = remote.iter().map(|e| e.start_ns).max().unwrap();
                let earliest_end = remote.iter().map(|e| e.end_ns()).min().unwrap();
                assert!(latest_start < earliest_end + 2_000_000);
                overlapping += 1;
            }
        }
    }
    assert!(overlapping > 0);
}

/// Smoke benchmark: the default workload on a small long-tail model.
#[test]
fn tracing_overhead_is_small() {
    let spec = generate_model(Archetype::LongTail, SizeBudget::mib(4), 22).unwrap();
    let reqs = generate_requests(&spec.header(), &WorkloadProfile::default(), 150).unwrap();
    let plan = plan_load_balanced(&spec.header(), &spec.profiles(), 4, None).unwrap();
    let cfg = ClusterConfig::new(BatchSize::fixed(32));
    let on = LocalCluster::start(&spec, plan.clone(), &cfg).unwrap();
    let off = LocalCluster::start(&spec, plan, &cfg.tracing(false)).unwrap();
    let mut clients = [MainClient::connect(&on.endpoint()).unwrap(), MainClient::connect(&off.endpoint()).unwrap()];
    let mut lat = [Vec::new(), Vec::new()];
    // Interleaved so host noise lands on both sides alike.
    for round in 0..2 {
        for r in &reqs {
            for (c, l) in clients.iter_mut().zip(lat.iter_mut()) {
                let t = Instant::now();
                c.rank(r).unwrap();
                if round > 0 {
                    l.push(t.elapsed().as_nanos() as f64);
                }
            }
        }
        on.collect_traces();
    }
    on.shutdown();
    off.shutdown();
    let p50 = |v: &[f64]| shardrec::analyze::percentile(v, 50.0).unwrap();
    let (traced, plain) = (p50(&lat[0]), p50(&lat[1]));
    assert!((traced / plain - 1.0).abs() < 0.05, "P50 traced {traced:.0} ns vs untraced {plain:.0} ns");
}
