use std::sync::atomic::{AtomicUsize, Ordering};

use super::*;
use crate::model::{generate_model, Activation, Archetype, SizeBudget};
use crate::planner::{plan, plan_singular, PlanOptions, Strategy};
use crate::replay::{generate_requests, CountDist, WorkloadProfile};
use crate::trace::ShardTag;

/// Straightforward f64 forward pass written against the model definition,
/// independent of the engine's batching and pooling code.
fn oracle_scores(spec: &ModelSpec, r: &RankingRequest) -> Vec<f64> {
    let h = spec.header();
    let layer = |id: LayerId, x: &[f64]| -> Vec<f64> {
        let l = spec.layer(id).unwrap();
        let n_in = l.in_dim();
        (0..l.out_dim())
            .map(|o| {
                let z: f64 = (0..n_in).map(|i| l.weight[o * n_in + i] as f64 * x[i]).sum::<f64>() + l.bias[o] as f64;
                match l.meta.activation {
                    Activation::Relu => z.max(0.0),
                    Activation::Identity => z,
                    Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
                }
            })
            .collect()
    };
    let pool = |tid: TableId, feats: &[crate::request::SparseFeature]| -> Vec<f64> {
        let t = spec.table(tid).unwrap();
        let mut acc = vec![0f64; t.dim()];
        if let Some(f) = feats.iter().find(|f| f.table_id == tid) {
            for &ix in &f.indices {
                for (a, v) in acc.iter_mut().zip(t.row(ix as usize)) {
                    *a += *v as f64;
                }
            }
        }
        acc
    };
    let run = |net: &Net, dense: &[f32], feats: &[crate::request::SparseFeature], user: &[f64]| -> Vec<f64> {
        let mut x: Vec<f64> = dense.iter().map(|&v| v as f64).collect();
        for &l in &net.bottom_layers {
            x = layer(l, &x);
        }
        for &t in &net.table_ids {
            x.extend(pool(t, feats));
        }
        x.extend_from_slice(user);
        for &l in net.interaction_layers.iter().chain(&net.top_layers) {
            x = layer(l, &x);
        }
        x
    };
    match h.candidate_net() {
        Some(cand) => {
            let u = run(h.user_net(), &r.user_dense, &r.user_sparse, &[]);
            r.candidates.iter().map(|c| run(cand, &c.dense, &c.sparse, &u)[0]).collect()
        }
        None => r.candidates.iter().map(|c| run(h.user_net(), &c.dense, &r.user_sparse, &[])[0]).collect(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

fn requests(spec: &ModelSpec, n: usize, seed: u64) -> Vec<RankingRequest> {
    let p = WorkloadProfile { seed, candidates: CountDist::Uniform { min: 1, max: 40 }, ..Default::default() };
    generate_requests(&spec.header(), &p, n).unwrap()
}

fn cfg(batch: usize) -> EngineConfig {
    EngineConfig::new(BatchSize::fixed(batch)).workers(2)
}

fn off() -> (Tracer, SpanCtx) {
    (Tracer::disabled(ShardTag::Main), SpanCtx { trace_id: 1, span_id: 1, request_id: 0 })
}

#[test]
fn singular_matches_f64_oracle() {
    let (t, ctx) = off();
    for arch in [Archetype::LongTail, Archetype::SingleDominant] {
        let spec = generate_model(arch, SizeBudget::mib(1), 9).unwrap();
        let engine = MainEngine::from_spec(&spec, plan_singular(&spec.header()), cfg(8)).unwrap();
        let none = LocalDispatch::new(vec![]);
        for r in requests(&spec, 5, 3) {
            let got = engine.execute(&r, &none, &t, ctx).unwrap();
            for (g, w) in got.iter().zip(oracle_scores(&spec, &r)) {
                assert!(rel(*g as f64, w) <= 1e-5, "{arch}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn zero_lookups_equal_dense_only_oracle() {
    let spec = generate_model(Archetype::LongTail, SizeBudget::mib(1), 1).unwrap();
    let mut r = requests(&spec, 1, 5).remove(0);
    r.user_sparse.clear();
    for c in &mut r.candidates {
        c.sparse.clear();
    }
    let (t, ctx) = off();
    let h = spec.header();
    let p = plan(&h, &h.profiles(), Strategy::LoadBalanced, 4, PlanOptions::default()).unwrap();
    let local = LocalDispatch::from_spec(&p, &spec).unwrap();
    let engine = MainEngine::from_spec(&spec, p, cfg(4)).unwrap();
    let got = engine.execute(&r, &local, &t, ctx).unwrap();
    for (g, w) in got.iter().zip(oracle_scores(&spec, &r)) {
        assert!(rel(*g as f64, w) <= 1e-6);
    }
}

#[test]
fn distributed_matches_singular_all_strategies() {
    let (t, ctx) = off();
    for (arch, seed) in [(Archetype::LongTail, 2), (Archetype::LongTailSmall, 3), (Archetype::SingleDominant, 4)] {
        let spec = generate_model(arch, SizeBudget::mib(2), seed).unwrap();
        let h = spec.header();
        let reqs = requests(&spec, 3, seed);
        let singular = MainEngine::from_spec(&spec, plan_singular(&h), cfg(16)).unwrap();
        let none = LocalDispatch::new(vec![]);
        let base: Vec<Vec<f32>> = reqs.iter().map(|r| singular.execute(r, &none, &t, ctx).unwrap()).collect();
        for strategy in [Strategy::OneShard, Strategy::CapacityBalanced, Strategy::LoadBalanced, Strategy::Nsbp] {
            for k in [1u32, 2, 4, 8] {
                let Ok(p) = plan(&h, &h.profiles(), strategy, k, PlanOptions::default()) else {
                    assert!(strategy == Strategy::Nsbp && k < h.nets.len() as u32);
                    continue;
                };
                let local = LocalDispatch::from_spec(&p, &spec).unwrap();
                let engine = MainEngine::from_spec(&spec, p, cfg(16)).unwrap();
                for (r, want) in reqs.iter().zip(&base) {
                    let got = engine.execute(r, &local, &t, ctx).unwrap();
                    for (g, w) in got.iter().zip(want) {
                        assert!(rel(*g as f64, *w as f64) <= 1e-5, "{arch} {strategy} k={k}: {g} vs {w}");
                    }
                }
            }
        }
    }
}

/// Counts calls per (net, batch) while forwarding to a local dispatch.
struct Counting {
    inner: LocalDispatch,
    calls: AtomicUsize,
    batches: AtomicUsize,
}

impl SparseDispatch for Counting {
    fn dispatch(&self, calls: &[ShardCall], tracer: &Tracer, parent: SpanCtx) -> Result<Vec<SparseLookupResponse>, EngineError> {
        let mut shards: Vec<u32> = calls.iter().map(|c| c.shard_id).collect();
        shards.sort();
        shards.dedup();
        assert_eq!(shards.len(), calls.len(), "each shard contacted once per net per batch");
        self.calls.fetch_add(calls.len(), Ordering::Relaxed);
        self.batches.fetch_add(1, Ordering::Relaxed);
        self.inner.dispatch(calls, tracer, parent)
    }
}

#[test]
fn nsbp_issues_one_rpc_per_hosting_shard() {
    let spec = generate_model(Archetype::LongTail, SizeBudget::mib(2), 6).unwrap();
    let h = spec.header();
    let p = plan(&h, &h.profiles(), Strategy::Nsbp, 4, PlanOptions::default()).unwrap();
    let hosting: usize = h
        .nets
        .iter()
        .map(|n| {
            let mut s: Vec<u32> = p.assignments.iter().filter(|a| n.table_ids.contains(&a.table_id)).map(|a| a.shard_id).collect();
            s.sort();
            s.dedup();
            s.len()
        })
        .sum();
    let counting = Counting { inner: LocalDispatch::from_spec(&p, &spec).unwrap(), calls: 0.into(), batches: 0.into() };
    let engine = MainEngine::from_spec(&spec, p, cfg(8)).unwrap();
    let (t, ctx) = off();
    let r = requests(&spec, 1, 8).remove(0);
    engine.execute(&r, &counting, &t, ctx).unwrap();
    let batches = r.candidates.len().div_ceil(8);
    assert_eq!(counting.calls.load(Ordering::Relaxed), batches * hosting);
}

#[test]
fn repeated_execution_is_bitwise_identical() {
    let spec = generate_model(Archetype::LongTail, SizeBudget::mib(1), 12).unwrap();
    let h = spec.header();
    let p = plan(&h, &h.profiles(), Strategy::CapacityBalanced, 2, PlanOptions::default()).unwrap();
    let local = LocalDispatch::from_spec(&p, &spec).unwrap();
    let engine = MainEngine::from_spec(&spec, p, cfg(4)).unwrap();
    let (t, ctx) = off();
    let r = requests(&spec, 1, 1).remove(0);
    let a = engine.execute(&r, &local, &t, ctx).unwrap();
    let b = engine.execute(&r, &local, &t, ctx).unwrap();
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

#[test]
fn candidate_net_starts_after_user_net() {
    let spec = generate_model(Archetype::LongTail, SizeBudget::mib(1), 3).unwrap();
    let h = spec.header();
    let engine = MainEngine::from_spec(&spec, plan_singular(&h), cfg(4)).unwrap();
    let tracer = Tracer::new(ShardTag::Main, 1 << 14);
    let root = tracer.root(5, 0, 0, Layer::RpcService, "request", Attrs::default());
    let r = requests(&spec, 1, 2).remove(0);
    engine.execute(&r, &LocalDispatch::new(vec![]), &tracer, root.ctx()).unwrap();
    drop(root);
    let ev = tracer.drain();
    let user = h.user_net().net_id;
    let nets: Vec<_> = ev.iter().filter(|e| e.name == "net").collect();
    assert_eq!(nets.len(), 2 * r.candidates.len().div_ceil(4));
    for u in nets.iter().filter(|e| e.attrs.net == Some(user)) {
        let c = nets
            .iter()
            .find(|e| e.attrs.net != Some(user) && e.attrs.batch == u.attrs.batch)
            .unwrap();
        assert!(c.start_ns >= u.end_ns());
    }
}

#[test]
fn bad_requests_rejected() {
    let spec = generate_model(Archetype::LongTail, SizeBudget::mib(1), 3).unwrap();
    let engine = MainEngine::from_spec(&spec, plan_singular(&spec.header()), cfg(4)).unwrap();
    let (t, ctx) = off();
    let mut r = requests(&spec, 1, 2).remove(0);
    r.candidates.clear();
    assert!(matches!(engine.execute(&r, &LocalDispatch::new(vec![]), &t, ctx), Err(EngineError::InvalidRequest(_))));
}
