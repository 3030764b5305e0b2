use std::fmt::Write as _;
use std::path::Path;

use super::{PartitionRef, PlanError, RpcOpDescriptor, ShardPlan, Strategy, TablePartitionAssignment};

pub const PLAN_MAGIC: &str = "shardrec-plan v1";

pub fn render_plan(plan: &ShardPlan) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{PLAN_MAGIC}");
    let _ = writeln!(s, "model_id {}", plan.model_id);
    let _ = writeln!(s, "strategy {}", plan.strategy);
    let _ = writeln!(s, "num_sparse_shards {}", plan.num_sparse_shards);
    match plan.bin_limit_bytes {
        Some(l) => {
            let _ = writeln!(s, "bin_limit_bytes {l}");
        }
        None => s.push_str("bin_limit_bytes -\n"),
    }
    for a in &plan.assignments {
        let _ = writeln!(
            s,
            "assign table={} shard={} partition={}/{}",
            a.table_id, a.shard_id, a.partition_index, a.partition_count
        );
    }
    for op in &plan.rpc_ops {
        let parts: Vec<String> = op
            .partitions
            .iter()
            .map(|p| format!("{}:{}/{}", p.table_id, p.partition_index, p.partition_count))
            .collect();
        let _ = writeln!(s, "rpc op={} net={} shard={} parts={}", op.op_id, op.net_id, op.shard_id, parts.join(","));
    }
    s
}

fn err(line: usize, message: impl Into<String>) -> PlanError {
    PlanError::Parse { line, message: message.into() }
}

fn num<T: std::str::FromStr>(line: usize, s: &str, what: &str) -> Result<T, PlanError> {
    s.parse().map_err(|_| err(line, format!("bad {what} `{s}`")))
}

fn frac(line: usize, s: &str) -> Result<(u32, u32), PlanError> {
    let (i, n) = s.split_once('/').ok_or_else(|| err(line, format!("expected index/count, got `{s}`")))?;
    Ok((num(line, i, "partition index")?, num(line, n, "partition count")?))
}

/// Split `key=value` fields, requiring exactly the given keys in order.
fn fields<'a>(line: usize, rest: &'a str, keys: &[&str]) -> Result<Vec<&'a str>, PlanError> {
    let parts: Vec<&str> = rest.split_whitespace().collect();
    if parts.len() != keys.len() {
        return Err(err(line, format!("expected fields {keys:?}")));
    }
    parts
        .iter()
        .zip(keys)
        .map(|(p, k)| {
            p.strip_prefix(k)
                .and_then(|v| v.strip_prefix('='))
                .ok_or_else(|| err(line, format!("expected `{k}=`, got `{p}`")))
        })
        .collect()
}

pub fn parse_plan(text: &str) -> Result<ShardPlan, PlanError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, l)) if l == PLAN_MAGIC => {}
        Some((n, l)) => return Err(err(n, format!("expected `{PLAN_MAGIC}`, got `{l}`"))),
        None => return Err(err(0, "empty plan file")),
    }
    let mut model_id = None;
    let mut strategy = None;
    let mut shards = None;
    let mut bin_limit = None;
    let mut assignments = Vec::new();
    let mut rpc_ops = Vec::new();
    for (n, line) in lines {
        if line.starts_with('#') {
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "model_id" => model_id = Some(rest.trim().to_string()),
            "strategy" => strategy = Some(rest.trim().parse::<Strategy>().map_err(|e| err(n, e))?),
            "num_sparse_shards" => shards = Some(num::<u32>(n, rest.trim(), "shard count")?),
            "bin_limit_bytes" => {
                bin_limit = Some(match rest.trim() {
                    "-" => None,
                    v => Some(num::<u64>(n, v, "bin limit")?),
                })
            }
            "assign" => {
                let f = fields(n, rest, &["table", "shard", "partition"])?;
                let (partition_index, partition_count) = frac(n, f[2])?;
                assignments.push(TablePartitionAssignment {
                    table_id: num(n, f[0], "table id")?,
                    shard_id: num(n, f[1], "shard id")?,
                    partition_index,
                    partition_count,
                });
            }
            "rpc" => {
                let f = fields(n, rest, &["op", "net", "shard", "parts"])?;
                let mut partitions = Vec::new();
                for p in f[3].split(',').filter(|p| !p.is_empty()) {
                    let (t, fr) = p.split_once(':').ok_or_else(|| err(n, format!("bad partition `{p}`")))?;
                    let (partition_index, partition_count) = frac(n, fr)?;
                    partitions.push(PartitionRef { table_id: num(n, t, "table id")?, partition_index, partition_count });
                }
                rpc_ops.push(RpcOpDescriptor {
                    op_id: num(n, f[0], "op id")?,
                    net_id: num(n, f[1], "net id")?,
                    shard_id: num(n, f[2], "shard id")?,
                    partitions,
                });
            }
            other => return Err(err(n, format!("unknown directive `{other}`"))),
        }
    }
    Ok(ShardPlan {
        model_id: model_id.ok_or_else(|| err(0, "missing model_id"))?,
        strategy: strategy.ok_or_else(|| err(0, "missing strategy"))?,
        num_sparse_shards: shards.ok_or_else(|| err(0, "missing num_sparse_shards"))?,
        bin_limit_bytes: bin_limit.flatten(),
        assignments,
        rpc_ops,
    })
}

pub fn save_plan(plan: &ShardPlan, path: impl AsRef<Path>) -> Result<(), PlanError> {
    std::fs::write(path, render_plan(plan))?;
    Ok(())
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<ShardPlan, PlanError> {
    parse_plan(&std::fs::read_to_string(path)?)
}
