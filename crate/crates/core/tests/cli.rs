use std::path::{Path, PathBuf};
use std::process::Command;

use shardrec::cluster::{ClusterConfig, ProcessCluster};
use shardrec::engine::BatchSize;
use shardrec::replay::RunLog;

fn shardrec(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_shardrec")).args(args).output().unwrap();
    assert!(out.status.success(), "shardrec {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Plans, serves as separate processes, replays and returns the run log and
/// trace files.
fn serve_and_replay(dir: &Path, model: &Path, strategy: &str, shards: &str) -> (PathBuf, Vec<PathBuf>) {
    let work = dir.join(format!("{strategy}-{shards}"));
    std::fs::create_dir(&work).unwrap();
    let plan = work.join("plan.txt");
    shardrec(&["plan", "--model", s(model), "--strategy", strategy, "--shards", shards, "--out", s(&plan)]);
    let cluster = ProcessCluster::start(
        Path::new(env!("CARGO_BIN_EXE_shardrec")),
        model,
        &plan,
        &ClusterConfig::new(BatchSize::fixed(16)),
        &work,
    )
    .unwrap();
    let log = work.join("run.csv");
    let endpoint = cluster.endpoint();
    let out = shardrec(&[
        "replay", "--model", s(model), "--plan", s(&plan), "--endpoint", &endpoint, "--count", "25", "--seed", "3",
        "--batch-size", "16", "--out", s(&log),
    ]);
    assert!(out.contains("25 sent, 0 failed"), "{out}");
    let files = cluster.shutdown().unwrap();
    assert_eq!(files.len(), shards.parse::<usize>().unwrap() + 1);
    let mut traces: Vec<PathBuf> =
        std::fs::read_dir(&work).unwrap().map(|e| e.unwrap().path()).filter(|p| s(p).ends_with(".tsv")).collect();
    traces.sort();
    (log, traces)
}

#[test]
fn generate_plan_serve_replay_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.bin");
    shardrec(&["generate", "--archetype", "long_tail", "--size-mib", "2", "--seed", "3", "--out", s(&model)]);

    let (base_log, base_traces) = serve_and_replay(dir.path(), &model, "singular", "0");
    let (log, traces) = serve_and_replay(dir.path(), &model, "nsbp", "2");
    assert_eq!(traces.len(), 3);
    let run = RunLog::load(&log).unwrap();
    assert_eq!(run.provenance.strategy, "nsbp");
    assert_eq!(run.ok_count(), 25);

    let with_traces = |flag: &str, files: &[PathBuf]| -> Vec<String> {
        files.iter().flat_map(|f| [flag.to_string(), s(f).to_string()]).collect()
    };
    let attr = dir.path().join("attr.csv");
    let mut args = vec!["analyze".to_string(), "attribute".into(), "--runlog".into(), s(&log).into(), "--out".into(), s(&attr).into()];
    args.extend(with_traces("--trace", &traces));
    let out = shardrec(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.starts_with("25 requests"), "{out}");
    let text = std::fs::read_to_string(&attr).unwrap();
    assert!(text.contains("# strategy=nsbp"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 26);

    let cmp = dir.path().join("cmp.csv");
    let stacks = dir.path().join("stacks.csv");
    let mut args = vec![
        "analyze".to_string(), "compare".into(), "--baseline-log".into(), s(&base_log).into(), "--candidate-log".into(),
        s(&log).into(), "--out".into(), s(&cmp).into(), "--stacks-out".into(), s(&stacks).into(),
    ];
    args.extend(with_traces("--baseline-trace", &base_traces));
    args.extend(with_traces("--candidate-trace", &traces));
    shardrec(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(std::fs::read_to_string(&cmp).unwrap().contains("cpu_ratio,"));
    assert!(std::fs::metadata(&stacks).unwrap().len() > 0);

    let json = dir.path().join("trace.json");
    let mut args = vec!["analyze".to_string(), "export-trace".into(), "--request-id".into(), "0".into(), "--out".into(), s(&json).into()];
    args.extend(with_traces("--trace", &traces));
    let out = shardrec(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.starts_with("1 requests"), "{out}");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(v.is_object() || v.is_array());

    let ops = dir.path().join("ops.csv");
    let mut args = vec!["analyze".to_string(), "per-shard".into(), "--runlog".into(), s(&log).into(), "--out".into(), s(&ops).into()];
    args.extend(with_traces("--trace", &traces));
    shardrec(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(std::fs::read_to_string(&ops).unwrap().contains("sls"));
}
