//! Per-shard trace files: a versioned header line, then one tab-separated
//! record per event.
//!
//! ```text
//! shardrec-trace v1	shard=s0
//! <trace_id:32 hex>	<span_id:16 hex>	<parent:16 hex>	<request_id>	<shard>	<layer>	<name>	<start_ns>	<dur_ns>	<cpu_ns>	<attrs>
//! ```
//!
//! `attrs` is a comma-separated `key=value` list (`net`, `batch`, `peer`,
//! `table`, `layer`, `ctx`) or `-`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Attrs, ShardTag, TraceError, TraceEvent};

pub const TRACE_MAGIC: &str = "shardrec-trace v1";

pub fn render_record(ev: &TraceEvent) -> String {
    let mut attrs = Vec::new();
    let a = &ev.attrs;
    for (k, v) in [("net", a.net), ("batch", a.batch), ("peer", a.peer), ("table", a.table), ("layer", a.layer)] {
        if let Some(v) = v {
            attrs.push(format!("{k}={v}"));
        }
    }
    if a.ctx != 0 {
        attrs.push(format!("ctx={}", a.ctx));
    }
    let attrs = if attrs.is_empty() { "-".to_string() } else { attrs.join(",") };
    format!(
        "{:032x}\t{:016x}\t{:016x}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        ev.trace_id,
        ev.span_id,
        ev.parent_span_id,
        ev.request_id,
        ev.shard,
        ev.layer,
        ev.name.replace(['\t', '\n'], " "),
        ev.start_ns,
        ev.dur_ns,
        ev.cpu_ns,
        attrs
    )
}

pub fn parse_record(line: &str) -> Result<TraceEvent, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 11 {
        return Err(format!("expected 11 fields, found {}", f.len()));
    }
    let hex128 = |s: &str| u128::from_str_radix(s, 16).map_err(|_| format!("bad hex `{s}`"));
    let hex64 = |s: &str| u64::from_str_radix(s, 16).map_err(|_| format!("bad hex `{s}`"));
    let dec = |s: &str| s.parse::<u64>().map_err(|_| format!("bad number `{s}`"));
    let mut attrs = Attrs::default();
    if f[10] != "-" {
        for kv in f[10].split(',') {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad attr `{kv}`"))?;
            let n = dec(v)?;
            let small = || u32::try_from(n).map_err(|_| format!("attr `{k}` out of range"));
            match k {
                "net" => attrs.net = Some(small()?),
                "batch" => attrs.batch = Some(small()?),
                "peer" => attrs.peer = Some(small()?),
                "table" => attrs.table = Some(small()?),
                "layer" => attrs.layer = Some(small()?),
                "ctx" => attrs.ctx = n,
                _ => return Err(format!("unknown attr `{k}`")),
            }
        }
    }
    Ok(TraceEvent {
        trace_id: hex128(f[0])?,
        span_id: hex64(f[1])?,
        parent_span_id: hex64(f[2])?,
        request_id: dec(f[3])?,
        shard: f[4].parse()?,
        layer: f[5].parse()?,
        name: f[6].to_string().into(),
        start_ns: dec(f[7])?,
        dur_ns: dec(f[8])?,
        cpu_ns: dec(f[9])?,
        attrs,
    })
}

pub struct TraceFileWriter {
    out: BufWriter<File>,
    written: u64,
}

impl TraceFileWriter {
    pub fn create(path: impl AsRef<Path>, shard: ShardTag) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{TRACE_MAGIC}\tshard={shard}")?;
        Ok(TraceFileWriter { out, written: 0 })
    }

    pub fn write_all(&mut self, events: &[TraceEvent]) -> io::Result<()> {
        for ev in events {
            writeln!(self.out, "{}", render_record(ev))?;
            self.written += 1;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn written(&self) -> u64 {
        self.written
    }
}

/// Contents of one shard's trace file. Corrupt records are skipped and
/// counted rather than failing the whole file.
#[derive(Debug, Clone)]
pub struct TraceFile {
    pub shard: ShardTag,
    pub events: Vec<TraceEvent>,
    pub corrupt: Vec<TraceError>,
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<TraceFile, TraceError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let shard = header
        .strip_prefix(TRACE_MAGIC)
        .and_then(|rest| rest.trim().strip_prefix("shard="))
        .and_then(|s| s.parse::<ShardTag>().ok())
        .ok_or_else(|| TraceError::BadHeader(header.clone()))?;
    let mut events = Vec::new();
    let mut corrupt = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        match parse_record(&line) {
            Ok(ev) => events.push(ev),
            Err(message) => corrupt.push(TraceError::CorruptRecord { line: i + 2, message }),
        }
    }
    Ok(TraceFile { shard, events, corrupt })
}

impl Clone for TraceError {
    fn clone(&self) -> Self {
        match self {
            TraceError::CorruptRecord { line, message } => TraceError::CorruptRecord { line: *line, message: message.clone() },
            TraceError::BadHeader(h) => TraceError::BadHeader(h.clone()),
            TraceError::Io(e) => TraceError::Io(io::Error::new(e.kind(), e.to_string())),
        }
    }
}
