//! Bring up a main shard and its sparse shards on loopback, either as
//! threads of this process or as separate `shardrec serve` processes.

use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::engine::{BatchSize, EngineConfig, EngineError, LocalDispatch, MainEngine, SparseDispatch, SparseShard};
use crate::model::{load_partial, ModelError, ModelSpec, TableId};
use crate::planner::{load_plan, PlanError, ShardId, ShardPlan};
use crate::trace::{read_trace_file, ShardTag, TraceError, TraceFile, Tracer, DEFAULT_TRACE_CAPACITY};
use crate::transport::{serve_main, serve_sparse, RemoteDispatch, ServerHandle, Topology, TransportError};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Startup(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    pub batch_size: BatchSize,
    /// Batch workers on the main shard.
    pub workers: usize,
    pub injected_rpc_delay: Duration,
    pub rpc_deadline: Duration,
    pub tracing: bool,
    pub trace_capacity: usize,
}

impl ClusterConfig {
    pub fn new(batch_size: BatchSize) -> Self {
        ClusterConfig {
            batch_size,
            workers: EngineConfig::new(batch_size).workers,
            injected_rpc_delay: Duration::ZERO,
            rpc_deadline: Duration::from_secs(10),
            tracing: true,
            trace_capacity: DEFAULT_TRACE_CAPACITY,
        }
    }

    pub fn workers(mut self, n: usize) -> Self {
        self.workers = n.max(1);
        self
    }

    pub fn injected_rpc_delay(mut self, d: Duration) -> Self {
        self.injected_rpc_delay = d;
        self
    }

    pub fn rpc_deadline(mut self, d: Duration) -> Self {
        self.rpc_deadline = d;
        self
    }

    pub fn tracing(mut self, on: bool) -> Self {
        self.tracing = on;
        self
    }

    fn engine(&self) -> EngineConfig {
        EngineConfig::new(self.batch_size).workers(self.workers)
    }

    fn tracer(&self, shard: ShardTag) -> Tracer {
        if self.tracing {
            Tracer::new(shard, self.trace_capacity)
        } else {
            Tracer::disabled(shard)
        }
    }
}

fn loopback() -> std::io::Result<TcpListener> {
    TcpListener::bind("127.0.0.1:0")
}

/// Every service as threads of the calling process.
pub struct LocalCluster {
    main: Option<ServerHandle>,
    sparse: Vec<Option<ServerHandle>>,
    topology: Topology,
}

impl LocalCluster {
    pub fn start(spec: &ModelSpec, plan: ShardPlan, cfg: &ClusterConfig) -> Result<Self, ClusterError> {
        let mut sparse = Vec::with_capacity(plan.num_sparse_shards as usize);
        for s in 0..plan.num_sparse_shards {
            let shard = SparseShard::from_spec(s, &plan, spec)?;
            sparse.push(Some(serve_sparse(loopback()?, shard, cfg.injected_rpc_delay, cfg.tracer(ShardTag::Sparse(s)))?));
        }
        let listener = loopback()?;
        let topology = Topology {
            main: listener.local_addr()?.to_string(),
            sparse: sparse.iter().flatten().map(|h| h.local_addr().to_string()).collect(),
            injected_rpc_delay: cfg.injected_rpc_delay,
        };
        let dispatch: Arc<dyn SparseDispatch> = if plan.is_singular() {
            Arc::new(LocalDispatch::new(Vec::new()))
        } else {
            Arc::new(RemoteDispatch::from_topology(&topology)?.with_deadline(cfg.rpc_deadline))
        };
        let engine = MainEngine::from_spec(spec, plan, cfg.engine())?;
        let main = serve_main(listener, engine, dispatch, cfg.tracer(ShardTag::Main))?;
        Ok(LocalCluster { main: Some(main), sparse, topology })
    }

    pub fn endpoint(&self) -> String {
        self.topology.main.clone()
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Shut one sparse shard down; later lookups to it fail.
    pub fn kill_sparse(&mut self, shard: ShardId) {
        if let Some(h) = self.sparse.get_mut(shard as usize).and_then(Option::take) {
            h.shutdown();
        }
    }

    /// Drain every shard's buffered spans. Call once the run is over.
    pub fn collect_traces(&self) -> Vec<TraceFile> {
        self.main
            .iter()
            .chain(self.sparse.iter().flatten())
            .map(|h| TraceFile { shard: h.tracer().shard(), events: h.tracer().drain(), corrupt: Vec::new() })
            .collect()
    }

    /// Spans dropped because a buffer was full, across all shards.
    pub fn dropped_spans(&self) -> u64 {
        self.main.iter().chain(self.sparse.iter().flatten()).map(|h| h.tracer().dropped()).sum()
    }

    pub fn shutdown(mut self) {
        if let Some(m) = self.main.take() {
            m.shutdown();
        }
        for s in self.sparse.drain(..).flatten() {
            s.shutdown();
        }
    }
}

/// Build a sparse-shard service from files, loading only the tables the
/// plan places on `shard`.
pub fn start_sparse_service(
    shard: ShardId,
    model: &Path,
    plan: &ShardPlan,
    listener: TcpListener,
    injected_delay: Duration,
    tracer: Tracer,
) -> Result<ServerHandle, ClusterError> {
    let mut tables: Vec<TableId> = plan.shard_contents(shard).iter().map(|a| a.table_id).collect();
    tables.sort_unstable();
    tables.dedup();
    let partial = load_partial(model, Some(&tables), false)?;
    let sparse = SparseShard::from_tables(shard, plan, &partial.tables)?;
    Ok(serve_sparse(listener, sparse, injected_delay, tracer)?)
}

/// Build the main-shard service from files. Embedding tables are loaded
/// only for a singular plan.
pub fn start_main_service(
    model: &Path,
    plan: ShardPlan,
    topology: &Topology,
    listener: TcpListener,
    config: EngineConfig,
    rpc_deadline: Duration,
    tracer: Tracer,
) -> Result<ServerHandle, ClusterError> {
    let singular = plan.is_singular();
    let partial = load_partial(model, if singular { None } else { Some(&[]) }, true)?;
    let dispatch: Arc<dyn SparseDispatch> = if singular {
        Arc::new(LocalDispatch::new(Vec::new()))
    } else {
        if topology.sparse.len() != plan.num_sparse_shards as usize {
            return Err(ClusterError::Startup(format!(
                "plan has {} sparse shards, topology lists {}",
                plan.num_sparse_shards,
                topology.sparse.len()
            )));
        }
        Arc::new(RemoteDispatch::from_topology(topology)?.with_deadline(rpc_deadline))
    };
    let engine = MainEngine::from_partial(partial, plan, config)?;
    Ok(serve_main(listener, engine, dispatch, tracer)?)
}

/// Every service as its own `shardrec serve` process.
pub struct ProcessCluster {
    children: Vec<(ShardTag, Child)>,
    trace_files: Vec<PathBuf>,
    topology: Topology,
}

/// Line a `serve` process prints on stdout once it accepts connections.
pub const READY_PREFIX: &str = "listening ";

fn spawn_serve(bin: &Path, args: &[String]) -> Result<(Child, String), ClusterError> {
    let mut child = Command::new(bin).arg("serve").args(args).stdout(Stdio::piped()).stderr(Stdio::inherit()).spawn()?;
    let stdout = child.stdout.take().expect("piped stdout");
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line)?;
    match line.trim().strip_prefix(READY_PREFIX) {
        Some(addr) => Ok((child, addr.to_string())),
        None => {
            let _ = child.kill();
            let _ = child.wait();
            Err(ClusterError::Startup(format!("serve {} did not come up: `{}`", args.join(" "), line.trim())))
        }
    }
}

impl ProcessCluster {
    /// `model` and `plan` must already be on disk; topology and trace
    /// files are written under `work_dir`.
    pub fn start(
        bin: &Path,
        model: &Path,
        plan_path: &Path,
        cfg: &ClusterConfig,
        work_dir: &Path,
    ) -> Result<Self, ClusterError> {
        let plan = load_plan(plan_path)?;
        let topo_path = work_dir.join("topology.txt");
        let mut topology = Topology {
            main: "127.0.0.1:0".into(),
            sparse: vec!["127.0.0.1:0".into(); plan.num_sparse_shards as usize],
            injected_rpc_delay: cfg.injected_rpc_delay,
        };
        topology.save(&topo_path)?;
        let common = |extra: Vec<String>| -> Vec<String> {
            let mut a = vec![
                "--model".into(),
                model.display().to_string(),
                "--plan".into(),
                plan_path.display().to_string(),
                "--topology".into(),
                topo_path.display().to_string(),
                "--listen".into(),
                "127.0.0.1:0".into(),
            ];
            a.extend(extra);
            a
        };
        let mut cluster = ProcessCluster { children: Vec::new(), trace_files: Vec::new(), topology: topology.clone() };
        let trace_arg = |cluster: &mut ProcessCluster, tag: ShardTag| -> Vec<String> {
            if !cfg.tracing {
                return Vec::new();
            }
            let p = work_dir.join(format!("trace-{tag}.tsv"));
            cluster.trace_files.push(p.clone());
            vec!["--trace".into(), p.display().to_string()]
        };
        for s in 0..plan.num_sparse_shards {
            let mut extra = vec!["--role".into(), "sparse".into(), "--shard-id".into(), s.to_string()];
            extra.extend(trace_arg(&mut cluster, ShardTag::Sparse(s)));
            let (child, addr) = spawn_serve(bin, &common(extra))?;
            cluster.children.push((ShardTag::Sparse(s), child));
            topology.sparse[s as usize] = addr;
        }
        topology.save(&topo_path)?;
        let mut extra = vec![
            "--role".into(),
            "main".into(),
            "--batch-size".into(),
            cfg.batch_size.to_string(),
            "--workers".into(),
            cfg.workers.to_string(),
            "--rpc-deadline-ms".into(),
            cfg.rpc_deadline.as_millis().to_string(),
        ];
        extra.extend(trace_arg(&mut cluster, ShardTag::Main));
        let (child, addr) = spawn_serve(bin, &common(extra))?;
        cluster.children.push((ShardTag::Main, child));
        topology.main = addr;
        topology.save(&topo_path)?;
        cluster.topology = topology;
        Ok(cluster)
    }

    pub fn endpoint(&self) -> String {
        self.topology.main.clone()
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Terminate every process, main first, and read back their trace
    /// files.
    pub fn shutdown(mut self) -> Result<Vec<TraceFile>, ClusterError> {
        self.stop_all();
        let mut out = Vec::with_capacity(self.trace_files.len());
        for p in &self.trace_files {
            out.push(read_trace_file(p)?);
        }
        Ok(out)
    }

    fn stop_all(&mut self) {
        self.children.sort_by_key(|(tag, _)| *tag);
        for (_, child) in &mut self.children {
            // SAFETY: plain signal delivery to a child we own.
            unsafe {
                libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
            }
            let deadline = Instant::now() + Duration::from_secs(10);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(2)),
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
        self.children.clear();
    }
}

impl Drop for ProcessCluster {
    fn drop(&mut self) {
        self.stop_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_model, Archetype, SizeBudget};
    use crate::planner::plan_nsbp;
    use crate::replay::{generate_requests, replay, Provenance, ReplayOptions, WorkloadProfile};
    use crate::trace::merge_traces;

    #[test]
    fn local_cluster_traces_link_up() {
        let spec = generate_model(Archetype::LongTail, SizeBudget::mib(1), 8).unwrap();
        let h = spec.header();
        let plan = plan_nsbp(&h, &h.profiles(), 2, None).unwrap();
        let cluster = LocalCluster::start(&spec, plan, &ClusterConfig::new(BatchSize::fixed(16)).workers(1)).unwrap();
        let reqs = generate_requests(&h, &WorkloadProfile::default(), 5).unwrap();
        let log = replay(&reqs, &cluster.endpoint(), &ReplayOptions::serial(), Provenance::default()).unwrap();
        assert_eq!(log.ok_count(), 5, "{:?}", log.entries);
        let merged = merge_traces(&cluster.collect_traces());
        assert_eq!(merged.traces.len(), 5);
        assert!(merged.orphans.is_empty());
        for (t, e) in merged.traces.iter().zip(&log.entries) {
            assert_eq!(t.trace_id, e.trace_id);
            assert!(!t.sparse_shards_contacted().is_empty());
        }
        cluster.shutdown();
    }
}
