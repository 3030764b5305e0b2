//! Cross-layer span capture.
//!
//! Every shard owns a [`Tracer`]. Spans are recorded into a bounded
//! lock-free queue and drained to a per-shard file by a background flusher.
//! Spans on different hosts are linked only through `parent_span_id`.

mod export;
mod merge;
mod record;
mod recorder;

pub use export::{export_chrome_trace, ChromeTrace};
pub use merge::{merge_traces, MergeReport, RequestTrace};
pub use record::{
    parse_record, read_trace_file, render_record, TraceFile, TraceFileWriter, TRACE_MAGIC,
};
pub use recorder::{context_id, cpu_clock_ns, FlushHandle, Span, SpanCtx, Tracer, DEFAULT_TRACE_CAPACITY};

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("corrupt trace record at line {line}: {message}")]
    CorruptRecord { line: usize, message: String },
    #[error("trace file header missing or unsupported: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layer {
    RpcSerde,
    RpcService,
    NetOverhead,
    DenseOp,
    SparseOp,
    RpcWait,
}

impl Layer {
    pub const ALL: [Layer; 6] = [
        Layer::RpcSerde,
        Layer::RpcService,
        Layer::NetOverhead,
        Layer::DenseOp,
        Layer::SparseOp,
        Layer::RpcWait,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::RpcSerde => "rpc_serde",
            Layer::RpcService => "rpc_service",
            Layer::NetOverhead => "net_overhead",
            Layer::DenseOp => "dense_op",
            Layer::SparseOp => "sparse_op",
            Layer::RpcWait => "rpc_wait",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Layer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Layer::ALL.into_iter().find(|l| l.name() == s).ok_or_else(|| format!("unknown layer `{s}`"))
    }
}

/// Which process recorded a span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShardTag {
    Main,
    Sparse(u32),
}

impl ShardTag {
    /// Prefix mixed into span ids so ids from different shards never collide
    /// within one trace.
    fn code(self) -> u64 {
        match self {
            ShardTag::Main => 1,
            ShardTag::Sparse(s) => 2 + s as u64,
        }
    }
}

impl fmt::Display for ShardTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShardTag::Main => f.write_str("main"),
            ShardTag::Sparse(s) => write!(f, "s{s}"),
        }
    }
}

impl FromStr for ShardTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "main" {
            return Ok(ShardTag::Main);
        }
        s.strip_prefix('s')
            .and_then(|n| n.parse().ok())
            .map(ShardTag::Sparse)
            .ok_or_else(|| format!("bad shard tag `{s}`"))
    }
}

/// Optional key/value annotations carried by a span.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Attrs {
    pub net: Option<u32>,
    pub batch: Option<u32>,
    /// Remote shard for RPC spans.
    pub peer: Option<u32>,
    pub table: Option<u32>,
    pub layer: Option<u32>,
    /// Execution context (thread) that recorded the span.
    pub ctx: u64,
}

impl Attrs {
    pub fn net(mut self, n: u32) -> Self {
        self.net = Some(n);
        self
    }
    pub fn batch(mut self, b: u32) -> Self {
        self.batch = Some(b);
        self
    }
    pub fn peer(mut self, p: u32) -> Self {
        self.peer = Some(p);
        self
    }
    pub fn table(mut self, t: u32) -> Self {
        self.table = Some(t);
        self
    }
    pub fn layer(mut self, l: u32) -> Self {
        self.layer = Some(l);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub trace_id: u128,
    pub span_id: u64,
    /// 0 for a root span.
    pub parent_span_id: u64,
    pub request_id: u64,
    pub shard: ShardTag,
    pub layer: Layer,
    pub name: Cow<'static, str>,
    /// Host-local wall clock, ns since the epoch.
    pub start_ns: u64,
    pub dur_ns: u64,
    pub cpu_ns: u64,
    pub attrs: Attrs,
}

impl TraceEvent {
    pub fn end_ns(&self) -> u64 {
        self.start_ns + self.dur_ns
    }

    pub fn is_root(&self) -> bool {
        self.parent_span_id == 0
    }
}
