use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ReplayError, ReplayMode};

/// Where a run's numbers came from. Written as `# key=value` lines at the
/// top of every delimited output.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub seed: u64,
    pub model_id: String,
    pub plan_hash: String,
    pub strategy: String,
    pub shards: u32,
    pub batch_size: String,
}

impl Provenance {
    pub fn write_comments(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "# seed={}", self.seed)?;
        writeln!(w, "# model_id={}", self.model_id)?;
        writeln!(w, "# plan_hash={}", self.plan_hash)?;
        writeln!(w, "# strategy={}", self.strategy)?;
        writeln!(w, "# shards={}", self.shards)?;
        writeln!(w, "# batch_size={}", self.batch_size)
    }

    /// Pick provenance keys out of comment lines; unknown keys are kept
    /// in the returned list.
    fn absorb(&mut self, key: &str, value: &str) -> Result<bool, ReplayError> {
        let bad = |k: &str| ReplayError::RunLog(format!("bad `{k}` value `{value}`"));
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "model_id" => self.model_id = value.into(),
            "plan_hash" => self.plan_hash = value.into(),
            "strategy" => self.strategy = value.into(),
            "shards" => self.shards = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = value.into(),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One request as seen by the client. Times are ns since the run started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogEntry {
    pub request_id: u64,
    #[serde(with = "hex_u128")]
    pub trace_id: u128,
    /// When the schedule wanted it sent; equals `sent_ns` in serial mode.
    pub scheduled_ns: u64,
    pub sent_ns: u64,
    pub received_ns: u64,
    pub ok: bool,
    pub error: String,
}

impl RunLogEntry {
    pub fn latency_ns(&self) -> u64 {
        self.received_ns.saturating_sub(self.sent_ns)
    }
}

mod hex_u128 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:032x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        u128::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub provenance: Provenance,
    pub mode: ReplayMode,
    pub target_qps: Option<f64>,
    pub entries: Vec<RunLogEntry>,
}

impl RunLog {
    pub fn ok_count(&self) -> usize {
        self.entries.iter().filter(|e| e.ok).count()
    }

    pub fn failed_count(&self) -> usize {
        self.entries.len() - self.ok_count()
    }

    /// Client latency of successful requests, ns.
    pub fn latencies_ns(&self) -> Vec<f64> {
        self.entries.iter().filter(|e| e.ok).map(|e| e.latency_ns() as f64).collect()
    }

    /// Sends per second between the first and last send.
    pub fn achieved_qps(&self) -> Option<f64> {
        let first = self.entries.iter().map(|e| e.sent_ns).min()?;
        let last = self.entries.iter().map(|e| e.sent_ns).max()?;
        (last > first).then(|| (self.entries.len() - 1) as f64 / ((last - first) as f64 / 1e9))
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), ReplayError> {
        let mut w = std::io::BufWriter::new(w);
        self.provenance.write_comments(&mut w)?;
        writeln!(w, "# mode={}", serde_json::to_value(self.mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())?;
        if let Some(q) = self.target_qps {
            writeln!(w, "# target_qps={q}")?;
        }
        let mut c = csv::Writer::from_writer(w);
        for e in &self.entries {
            c.serialize(e).map_err(|e| ReplayError::RunLog(e.to_string()))?;
        }
        if self.entries.is_empty() {
            c.write_record(["request_id", "trace_id", "scheduled_ns", "sent_ns", "received_ns", "ok", "error"])
                .map_err(|e| ReplayError::RunLog(e.to_string()))?;
        }
        c.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReplayError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self, ReplayError> {
        let text = std::io::read_to_string(r)?;
        let mut provenance = Provenance::default();
        let mut mode = ReplayMode::Serial;
        let mut target_qps = None;
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            let Some((k, v)) = line.trim_start_matches('#').trim().split_once('=') else { continue };
            if provenance.absorb(k, v)? {
                continue;
            }
            match k {
                "mode" => {
                    mode = serde_json::from_value(serde_json::Value::String(v.into()))
                        .map_err(|_| ReplayError::RunLog(format!("bad mode `{v}`")))?
                }
                "target_qps" => target_qps = Some(v.parse().map_err(|_| ReplayError::RunLog(format!("bad qps `{v}`")))?),
                _ => {}
            }
        }
        let mut c = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let entries = c
            .deserialize()
            .collect::<Result<Vec<RunLogEntry>, _>>()
            .map_err(|e| ReplayError::RunLog(e.to_string()))?;
        Ok(RunLog { provenance, mode, target_qps, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReplayError> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
