use std::io::Write;

use super::{percentile, AnalyzeError, AttributionReport, LayerStack, STACK_LAYERS};
use crate::replay::{Provenance, RunLog};

pub const PERCENTILES: [f64; 3] = [50.0, 90.0, 99.0];

/// Everything known about one run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub label: String,
    pub provenance: Provenance,
    pub requests: usize,
    /// Client-observed latency of successful requests, ns.
    pub client_latency_ns: Vec<f64>,
    pub attribution: AttributionReport,
}

impl RunSummary {
    pub fn new(label: impl Into<String>, log: &RunLog, attribution: AttributionReport) -> Self {
        RunSummary {
            label: label.into(),
            provenance: log.provenance.clone(),
            requests: log.entries.len(),
            client_latency_ns: log.latencies_ns(),
            attribution,
        }
    }

    /// Client latency when the run log has any, else traced E2E.
    pub fn latencies(&self) -> Vec<f64> {
        if self.client_latency_ns.is_empty() {
            self.attribution.e2e_ns()
        } else {
            self.client_latency_ns.clone()
        }
    }

    /// Share of E2E spent in the embedded portion, from the P50 request.
    pub fn embedded_share(&self) -> Result<f64, AnalyzeError> {
        let r = self.attribution.stack_at(50.0)?;
        Ok(if r.e2e_ns == 0 { 0.0 } else { r.stack.embedded_portion / r.e2e_ns as f64 })
    }
}

/// Candidate over baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct OverheadReport {
    pub baseline: String,
    pub candidate: String,
    pub seed: u64,
    /// Latency ratio at P50, P90, P99.
    pub latency_ratio: [f64; 3],
    pub cpu_ratio: f64,
    pub rpc_ops: [u64; 2],
    pub embedded_share: [f64; 2],
    pub stacks: [[LayerStack; 3]; 2],
}

fn ratio(candidate: f64, baseline: f64) -> f64 {
    if candidate == baseline {
        1.0
    } else {
        candidate / baseline
    }
}

/// Compare two runs of the same model under the same workload.
pub fn compare_runs(baseline: &RunSummary, candidate: &RunSummary) -> Result<OverheadReport, AnalyzeError> {
    let (b, c) = (&baseline.provenance, &candidate.provenance);
    if b.seed != c.seed {
        return Err(AnalyzeError::WorkloadMismatch(format!("workload seeds differ: {} vs {}", b.seed, c.seed)));
    }
    if b.model_id != c.model_id {
        return Err(AnalyzeError::WorkloadMismatch(format!("models differ: {} vs {}", b.model_id, c.model_id)));
    }
    if baseline.requests != candidate.requests {
        return Err(AnalyzeError::WorkloadMismatch(format!(
            "request counts differ: {} vs {}",
            baseline.requests, candidate.requests
        )));
    }
    let (lb, lc) = (baseline.latencies(), candidate.latencies());
    let mut latency_ratio = [0.0; 3];
    let mut stacks = [[LayerStack::default(); 3]; 2];
    for (i, p) in PERCENTILES.into_iter().enumerate() {
        latency_ratio[i] = ratio(percentile(&lc, p)?, percentile(&lb, p)?);
        stacks[0][i] = baseline.attribution.stack_at(p)?.stack;
        stacks[1][i] = candidate.attribution.stack_at(p)?.stack;
    }
    Ok(OverheadReport {
        baseline: baseline.label.clone(),
        candidate: candidate.label.clone(),
        seed: b.seed,
        latency_ratio,
        cpu_ratio: ratio(candidate.attribution.total_cpu_ns() as f64, baseline.attribution.total_cpu_ns() as f64),
        rpc_ops: [baseline.attribution.rpc_ops(), candidate.attribution.rpc_ops()],
        embedded_share: [baseline.embedded_share()?, candidate.embedded_share()?],
        stacks,
    })
}

impl OverheadReport {
    pub fn write_csv(&self, w: impl Write, prov: &Provenance) -> Result<(), AnalyzeError> {
        let mut w = std::io::BufWriter::new(w);
        prov.write_comments(&mut w)?;
        writeln!(w, "# baseline={}", self.baseline)?;
        writeln!(w, "# candidate={}", self.candidate)?;
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["metric", "value"])?;
        for (p, r) in PERCENTILES.iter().zip(self.latency_ratio) {
            c.write_record([format!("latency_ratio_p{p}"), format!("{r:.6}")])?;
        }
        c.write_record(["cpu_ratio".to_string(), format!("{:.6}", self.cpu_ratio)])?;
        c.write_record(["rpc_ops_baseline".to_string(), self.rpc_ops[0].to_string()])?;
        c.write_record(["rpc_ops_candidate".to_string(), self.rpc_ops[1].to_string()])?;
        c.write_record(["embedded_share_baseline".to_string(), format!("{:.6}", self.embedded_share[0])])?;
        c.write_record(["embedded_share_candidate".to_string(), format!("{:.6}", self.embedded_share[1])])?;
        c.flush()?;
        Ok(())
    }
}

/// Layer stacks of several runs at P50/P90/P99. Each percentile's stacks
/// are also given as a fraction of the tallest E2E at that percentile.
pub fn write_stack_csv(w: impl Write, prov: &Provenance, runs: &[&RunSummary]) -> Result<(), AnalyzeError> {
    let mut w = std::io::BufWriter::new(w);
    prov.write_comments(&mut w)?;
    let mut c = csv::Writer::from_writer(w);
    let mut header = vec!["run".to_string(), "percentile".into(), "e2e_ns".into()];
    header.extend(STACK_LAYERS.iter().map(|l| format!("{l}_ns")));
    header.extend(STACK_LAYERS.iter().map(|l| format!("{l}_norm")));
    c.write_record(&header)?;
    for p in PERCENTILES {
        let picked = runs.iter().map(|r| r.attribution.stack_at(p)).collect::<Result<Vec<_>, _>>()?;
        let tallest = picked.iter().map(|r| r.e2e_ns).max().unwrap_or(0).max(1) as f64;
        for (run, r) in runs.iter().zip(&picked) {
            let mut row = vec![run.label.clone(), format!("p{p}"), r.e2e_ns.to_string()];
            row.extend(r.stack.to_array().iter().map(|v| format!("{v:.0}")));
            row.extend(r.stack.to_array().iter().map(|v| format!("{:.6}", v / tallest)));
            c.write_record(&row)?;
        }
    }
    c.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyze::RequestAttribution;
    use std::collections::BTreeMap;

    fn run(label: &str, seed: u64, e2e: &[u64]) -> RunSummary {
        let requests = e2e
            .iter()
            .enumerate()
            .map(|(i, &t)| RequestAttribution {
                request_id: i as u64,
                trace_id: i as u128 + 1,
                e2e_ns: t,
                stack: LayerStack { dense_ops: t as f64 / 2.0, embedded_portion: t as f64 / 2.0, ..Default::default() },
                bounding: Vec::new(),
                rpc_ops: 2,
                rpc_ops_by_batch: BTreeMap::new(),
                sparse_shards: vec![0],
                cpu_ns: [(crate::trace::ShardTag::Main, t / 3)].into_iter().collect(),
                negative_network: 0,
            })
            .collect();
        RunSummary {
            label: label.into(),
            provenance: Provenance { seed, model_id: "m".into(), ..Default::default() },
            requests: e2e.len(),
            client_latency_ns: Vec::new(),
            attribution: AttributionReport { requests },
        }
    }

    #[test]
    fn identity_and_symmetry() {
        let a = run("a", 1, &[100, 200, 300, 400]);
        let b = run("b", 1, &[150, 220, 390, 900]);
        let same = compare_runs(&a, &a).unwrap();
        assert_eq!(same.latency_ratio, [1.0; 3]);
        assert_eq!(same.cpu_ratio, 1.0);
        let ab = compare_runs(&a, &b).unwrap();
        let ba = compare_runs(&b, &a).unwrap();
        for i in 0..3 {
            assert!((ab.latency_ratio[i] * ba.latency_ratio[i] - 1.0).abs() < 1e-12);
        }
        assert!((ab.cpu_ratio * ba.cpu_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_workloads_refused() {
        let a = run("a", 1, &[1, 2]);
        assert!(matches!(compare_runs(&a, &run("b", 2, &[1, 2])), Err(AnalyzeError::WorkloadMismatch(_))));
        assert!(matches!(compare_runs(&a, &run("b", 1, &[1, 2, 3])), Err(AnalyzeError::WorkloadMismatch(_))));
    }

    #[test]
    fn stack_table_normalizes_to_tallest() {
        let a = run("a", 1, &[100, 200]);
        let b = run("b", 1, &[400, 400]);
        let mut buf = Vec::new();
        write_stack_csv(&mut buf, &a.provenance, &[&a, &b]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# seed=1\n"));
        let p50_a = text.lines().find(|l| l.starts_with("a,p50")).unwrap();
        // a's P50 request is 100 ns against b's 400 ns: 50/400 each.
        assert!(p50_a.ends_with("0.125000,0.125000,0.000000,0.000000,0.000000"), "{p50_a}");
    }
}
