use std::fs::File;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use shardrec::analyze::{
    attribute_run, compare_runs, operator_stats, write_operator_csv, write_stack_csv, AttributionReport, RunSummary,
};
use shardrec::cluster::{start_main_service, start_sparse_service, READY_PREFIX};
use shardrec::engine::{BatchSize, EngineConfig};
use shardrec::model::{generate_model, load_header, save_spec, Archetype, SizeBudget};
use shardrec::planner::{
    estimate_pooling_factors, load_plan, plan, save_plan, validate_plan, PlanOptions, Strategy, DEFAULT_PROFILE_SAMPLE,
};
use shardrec::replay::{generate_requests, replay, Provenance, ReplayMode, ReplayOptions, RunLog, WorkloadProfile};
use shardrec::trace::{export_chrome_trace, merge_traces, read_trace_file, ShardTag, Tracer, DEFAULT_TRACE_CAPACITY};
use shardrec::transport::Topology;

#[derive(Parser)]
#[command(name = "shardrec", version, about = "Distributed recommendation inference on sharded embedding tables")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic model.
    Generate {
        #[arg(long)]
        archetype: Archetype,
        #[arg(long, default_value_t = 8)]
        size_mib: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shard a model's embedding tables.
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long, default_value_t = 1)]
        shards: u32,
        #[arg(long)]
        bin_limit_bytes: Option<u64>,
        #[arg(long)]
        capacity_bytes: Option<u64>,
        /// Estimate pooling factors from this workload instead of the model's.
        #[arg(long)]
        workload: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a main or sparse shard until SIGINT/SIGTERM.
    Serve(ServeArgs),
    /// Send a workload to a main shard and write the run log.
    Replay(ReplayArgs),
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Main,
    Sparse,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, value_enum)]
    role: Role,
    #[arg(long)]
    shard_id: Option<u32>,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    topology: PathBuf,
    /// Bind here instead of the topology address; port 0 picks one.
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value = "single")]
    batch_size: BatchSize,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    rpc_deadline_ms: u64,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Main shard address; taken from --topology when absent.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Recorded in the run log for provenance.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ModeArg>,
    #[arg(long)]
    qps: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    duration_s: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "single")]
    batch_size: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Serial,
    OpenLoop,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Per-request five-layer stacks.
    Attribute {
        #[arg(long)]
        runlog: PathBuf,
        #[arg(long = "trace", required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latency and CPU overhead of a candidate run against a baseline.
    Compare {
        #[arg(long)]
        baseline_log: PathBuf,
        #[arg(long = "baseline-trace", required = true)]
        baseline_traces: Vec<PathBuf>,
        #[arg(long)]
        candidate_log: PathBuf,
        #[arg(long = "candidate-trace", required = true)]
        candidate_traces: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the P50/P90/P99 stacks of both runs here.
        #[arg(long)]
        stacks_out: Option<PathBuf>,
    },
    /// Trace-viewer JSON with one lane per shard.
    ExportTrace {
        #[arg(long = "trace", required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        request_id: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Operator latency distributions per shard.
    PerShard {
        #[arg(long)]
        runlog: PathBuf,
        #[arg(long = "trace", required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Generate { archetype, size_mib, seed, out } => {
            let spec = generate_model(archetype, SizeBudget::mib(size_mib), seed)?;
            save_spec(&spec, &out)?;
            println!("{} tables, {} bytes -> {}", spec.tables.len(), spec.header().total_bytes(), out.display());
        }
        Cmd::Plan { model, strategy, shards, bin_limit_bytes, capacity_bytes, workload, out } => {
            let header = load_header(&model)?;
            let profiles = match workload {
                Some(w) => {
                    let reqs = generate_requests(&header, &WorkloadProfile::load(w)?, DEFAULT_PROFILE_SAMPLE)?;
                    estimate_pooling_factors(&header, &reqs)?
                }
                None => header.profiles(),
            };
            let opts = PlanOptions { shard_capacity_bytes: capacity_bytes, bin_limit_bytes };
            let p = plan(&header, &profiles, strategy, shards, opts)?;
            let report = validate_plan(&header, &p);
            if !report.is_clean() {
                bail!("planner produced an invalid plan: {:?}", report.violations);
            }
            save_plan(&p, &out)?;
            println!("{} on {} shards, {} rpc ops, hash {} -> {}", p.strategy, p.num_sparse_shards, p.rpc_ops.len(), p.plan_hash(), out.display());
        }
        Cmd::Serve(a) => serve(a)?,
        Cmd::Replay(a) => run_replay(a)?,
        Cmd::Analyze(a) => analyze(a)?,
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let plan = load_plan(&a.plan)?;
    let topology = Topology::load(&a.topology)?;
    let (tag, configured) = match a.role {
        Role::Main => (ShardTag::Main, topology.main.clone()),
        Role::Sparse => {
            let id = a.shard_id.context("--shard-id is required for a sparse shard")?;
            let addr = topology.sparse.get(id as usize).with_context(|| format!("topology has no sparse shard {id}"))?;
            (ShardTag::Sparse(id), addr.clone())
        }
    };
    let listener = TcpListener::bind(a.listen.as_deref().unwrap_or(&configured))?;
    let tracer = if a.trace.is_some() { Tracer::new(tag, DEFAULT_TRACE_CAPACITY) } else { Tracer::disabled(tag) };
    let flusher = a.trace.as_ref().map(|p| tracer.spawn_flusher(p)).transpose()?;
    let handle = match (a.role, tag) {
        (Role::Sparse, ShardTag::Sparse(id)) => {
            start_sparse_service(id, &a.model, &plan, listener, topology.injected_rpc_delay, tracer.clone())?
        }
        _ => {
            let mut config = EngineConfig::new(a.batch_size);
            if let Some(w) = a.workers {
                config = config.workers(w);
            }
            let deadline = Duration::from_millis(a.rpc_deadline_ms);
            start_main_service(&a.model, plan, &topology, listener, config, deadline, tracer.clone())?
        }
    };
    let (tx, rx) = std::sync::mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })?;
    println!("{READY_PREFIX}{}", handle.local_addr());
    let _ = rx.recv();
    handle.shutdown();
    if let Some(f) = flusher {
        f.finish()?;
    }
    if tracer.dropped() > 0 {
        eprintln!("{tag}: {} spans dropped", tracer.dropped());
    }
    Ok(())
}

fn run_replay(a: ReplayArgs) -> Result<()> {
    let header = load_header(&a.model)?;
    let mut profile = match &a.workload {
        Some(p) => WorkloadProfile::load(p)?,
        None => WorkloadProfile::default(),
    };
    if let Some(s) = a.seed {
        profile.seed = s;
    }
    if let Some(m) = a.mode {
        profile.mode = match m {
            ModeArg::Serial => ReplayMode::Serial,
            ModeArg::OpenLoop => ReplayMode::OpenLoop,
        };
    }
    if a.qps.is_some() {
        profile.target_qps = a.qps;
    }
    if a.duration_s.is_some() {
        profile.duration_s = a.duration_s;
        profile.requests = None;
    }
    if a.count.is_some() {
        profile.requests = a.count;
    }
    let n = profile.request_count().context("workload sets neither a request count nor rate and duration")?;
    let requests = generate_requests(&header, &profile, n)?;
    let endpoint = match (a.endpoint, a.topology) {
        (Some(e), _) => e,
        (None, Some(t)) => Topology::load(t)?.main,
        (None, None) => bail!("give --endpoint or --topology"),
    };
    let plan = a.plan.as_ref().map(load_plan).transpose()?;
    let provenance = Provenance {
        seed: profile.seed,
        model_id: header.model_id.clone(),
        plan_hash: plan.as_ref().map(|p| p.plan_hash()).unwrap_or_default(),
        strategy: plan.as_ref().map(|p| p.strategy.to_string()).unwrap_or_default(),
        shards: plan.as_ref().map(|p| p.num_sparse_shards).unwrap_or(0),
        batch_size: a.batch_size,
    };
    let log = replay(&requests, &endpoint, &ReplayOptions::from_profile(&profile), provenance)?;
    log.save(&a.out)?;
    println!("{} sent, {} failed -> {}", log.entries.len(), log.failed_count(), a.out.display());
    Ok(())
}

fn load_run(runlog: &Path, traces: &[PathBuf]) -> Result<(RunLog, AttributionReport, Vec<shardrec::trace::RequestTrace>)> {
    let log = RunLog::load(runlog)?;
    let files = traces.iter().map(read_trace_file).collect::<Result<Vec<_>, _>>()?;
    let merged = merge_traces(&files);
    if !merged.orphans.is_empty() || merged.corrupt_records > 0 {
        eprintln!("{} orphan spans, {} corrupt records", merged.orphans.len(), merged.corrupt_records);
    }
    let report = attribute_run(&merged.traces)?;
    Ok((log, report, merged.traces))
}

fn analyze(cmd: AnalyzeCmd) -> Result<()> {
    match cmd {
        AnalyzeCmd::Attribute { runlog, traces, out } => {
            let (log, report, _) = load_run(&runlog, &traces)?;
            report.write_csv(File::create(&out)?, &log.provenance)?;
            let p50 = report.stack_at(50.0)?;
            println!("{} requests, P50 E2E {} ns, {} rpc ops -> {}", report.requests.len(), p50.e2e_ns, report.rpc_ops(), out.display());
        }
        AnalyzeCmd::Compare { baseline_log, baseline_traces, candidate_log, candidate_traces, out, stacks_out } => {
            let (bl, br, _) = load_run(&baseline_log, &baseline_traces)?;
            let (cl, cr, _) = load_run(&candidate_log, &candidate_traces)?;
            let label = |l: &RunLog| format!("{}-{}", l.provenance.strategy, l.provenance.shards);
            let base = RunSummary::new(label(&bl), &bl, br);
            let cand = RunSummary::new(label(&cl), &cl, cr);
            let report = compare_runs(&base, &cand)?;
            report.write_csv(File::create(&out)?, &cl.provenance)?;
            if let Some(s) = stacks_out {
                write_stack_csv(File::create(s)?, &cl.provenance, &[&base, &cand])?;
            }
            println!(
                "P50 x{:.3}, P99 x{:.3}, CPU x{:.3} -> {}",
                report.latency_ratio[0],
                report.latency_ratio[2],
                report.cpu_ratio,
                out.display()
            );
        }
        AnalyzeCmd::ExportTrace { traces, request_id, out } => {
            let files = traces.iter().map(read_trace_file).collect::<Result<Vec<_>, _>>()?;
            let mut merged = merge_traces(&files).traces;
            if let Some(id) = request_id {
                merged.retain(|t| t.request_id == id);
            }
            let chrome = export_chrome_trace(&merged);
            std::fs::write(&out, chrome.to_json())?;
            println!("{} requests, {} lanes -> {}", merged.len(), chrome.lanes(), out.display());
        }
        AnalyzeCmd::PerShard { runlog, traces, out } => {
            let (log, _, merged) = load_run(&runlog, &traces)?;
            let stats = operator_stats(&merged);
            write_operator_csv(File::create(&out)?, &log.provenance, &stats)?;
            println!("{} operator groups -> {}", stats.len(), out.display());
        }
    }
    Ok(())
}
