use std::borrow::Cow;
use std::cell::Cell;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crossbeam::queue::ArrayQueue;

use super::{Attrs, Layer, ShardTag, TraceEvent, TraceFileWriter};

pub const DEFAULT_TRACE_CAPACITY: usize = 1 << 16;

static NEXT_CONTEXT: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static CONTEXT: Cell<u64> = const { Cell::new(0) };
    /// Live spans opened on this thread.
    static OPEN: Cell<u32> = const { Cell::new(0) };
}

/// Stable id of the calling thread, used to group spans by execution context.
pub fn context_id() -> u64 {
    CONTEXT.with(|c| {
        if c.get() == 0 {
            c.set(NEXT_CONTEXT.fetch_add(1, Ordering::Relaxed));
        }
        c.get()
    })
}

fn thread_cpu_ns() -> u64 {
    cpu_clock_ns(libc::CLOCK_THREAD_CPUTIME_ID)
}

/// Reads a CPU-time clock, e.g. one from `pthread_getcpuclockid`; 0 if the
/// clock is gone.
pub fn cpu_clock_ns(clock: libc::clockid_t) -> u64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid out-pointer; an invalid clock id only makes
    // the call fail.
    let rc = unsafe { libc::clock_gettime(clock, &mut ts) };
    if rc != 0 {
        return 0;
    }
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

/// Identity of a span as seen by its children.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpanCtx {
    pub trace_id: u128,
    pub span_id: u64,
    pub request_id: u64,
}

struct Inner {
    shard: ShardTag,
    enabled: bool,
    queue: ArrayQueue<TraceEvent>,
    dropped: AtomicU64,
    recorded: AtomicU64,
    next_span: AtomicU64,
    base: Instant,
    base_wall_ns: u64,
}

/// Per-shard span recorder. Cheap to clone.
#[derive(Clone)]
pub struct Tracer {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tracer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tracer")
            .field("shard", &self.inner.shard)
            .field("enabled", &self.inner.enabled)
            .finish()
    }
}

impl Tracer {
    pub fn new(shard: ShardTag, capacity: usize) -> Self {
        Self::build(shard, true, capacity.max(1))
    }

    /// A tracer that hands out span ids but records nothing.
    pub fn disabled(shard: ShardTag) -> Self {
        Self::build(shard, false, 1)
    }

    fn build(shard: ShardTag, enabled: bool, capacity: usize) -> Self {
        let base_wall_ns = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0);
        Tracer {
            inner: Arc::new(Inner {
                shard,
                enabled,
                queue: ArrayQueue::new(capacity),
                dropped: AtomicU64::new(0),
                recorded: AtomicU64::new(0),
                next_span: AtomicU64::new(1),
                base: Instant::now(),
                base_wall_ns,
            }),
        }
    }

    pub fn shard(&self) -> ShardTag {
        self.inner.shard
    }

    pub fn is_enabled(&self) -> bool {
        self.inner.enabled
    }

    /// Events dropped because the buffer was full.
    pub fn dropped(&self) -> u64 {
        self.inner.dropped.load(Ordering::Relaxed)
    }

    pub fn recorded(&self) -> u64 {
        self.inner.recorded.load(Ordering::Relaxed)
    }

    pub fn new_span_id(&self) -> u64 {
        let n = self.inner.next_span.fetch_add(1, Ordering::Relaxed);
        (self.inner.shard.code() << 48) | (n & ((1 << 48) - 1))
    }

    pub fn wall_ns(&self, at: Instant) -> u64 {
        let off = at.checked_duration_since(self.inner.base).unwrap_or(Duration::ZERO);
        self.inner.base_wall_ns + off.as_nanos() as u64
    }

    /// Start a span with an explicit parent id; 0 makes it a trace root.
    pub fn root(
        &self,
        trace_id: u128,
        request_id: u64,
        parent_span_id: u64,
        layer: Layer,
        name: impl Into<Cow<'static, str>>,
        attrs: Attrs,
    ) -> Span {
        let ctx = SpanCtx { trace_id, span_id: self.new_span_id(), request_id };
        Span::start(self, ctx, parent_span_id, layer, name.into(), attrs)
    }

    pub fn span(&self, parent: SpanCtx, layer: Layer, name: impl Into<Cow<'static, str>>, attrs: Attrs) -> Span {
        let ctx = SpanCtx { span_id: self.new_span_id(), ..parent };
        Span::start(self, ctx, parent.span_id, layer, name.into(), attrs)
    }

    /// Record a span whose interval was measured elsewhere, e.g. an RPC
    /// whose end is stamped by a reader thread. A nonzero `attrs.ctx` names
    /// the context that spent `cpu_ns`; otherwise it is the caller's.
    #[allow(clippy::too_many_arguments)]
    pub fn record_interval(
        &self,
        parent: SpanCtx,
        span_id: u64,
        layer: Layer,
        name: impl Into<Cow<'static, str>>,
        start: Instant,
        end: Instant,
        cpu_ns: u64,
        attrs: Attrs,
    ) {
        if !self.inner.enabled {
            return;
        }
        let dur = end.saturating_duration_since(start).as_nanos() as u64;
        self.push(TraceEvent {
            trace_id: parent.trace_id,
            span_id,
            parent_span_id: parent.span_id,
            request_id: parent.request_id,
            shard: self.inner.shard,
            layer,
            name: name.into(),
            start_ns: self.wall_ns(start),
            dur_ns: dur,
            cpu_ns: cpu_ns.min(dur),
            attrs: Attrs { ctx: if attrs.ctx != 0 { attrs.ctx } else { context_id() }, ..attrs },
        });
    }

    fn push(&self, ev: TraceEvent) {
        match self.inner.queue.push(ev) {
            Ok(()) => {
                self.inner.recorded.fetch_add(1, Ordering::Relaxed);
            }
            Err(_) => {
                self.inner.dropped.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    /// Take every buffered event.
    pub fn drain(&self) -> Vec<TraceEvent> {
        let mut out = Vec::with_capacity(self.inner.queue.len());
        while let Some(ev) = self.inner.queue.pop() {
            out.push(ev);
        }
        out
    }

    /// Start a background thread that drains the buffer into `path`.
    /// A disabled tracer creates no file.
    pub fn spawn_flusher(&self, path: impl AsRef<Path>) -> io::Result<FlushHandle> {
        if !self.inner.enabled {
            return Ok(FlushHandle { stop: Arc::new(AtomicBool::new(true)), thread: None });
        }
        let mut writer = TraceFileWriter::create(path, self.inner.shard)?;
        let stop = Arc::new(AtomicBool::new(false));
        let tracer = self.clone();
        let flag = stop.clone();
        let thread = std::thread::Builder::new().name("trace-flush".into()).spawn(move || -> io::Result<u64> {
            loop {
                let stopping = flag.load(Ordering::Acquire);
                let batch = tracer.drain();
                if !batch.is_empty() {
                    writer.write_all(&batch)?;
                }
                if stopping {
                    writer.flush()?;
                    return Ok(writer.written());
                }
                if batch.is_empty() {
                    std::thread::sleep(Duration::from_millis(2));
                }
            }
        })?;
        Ok(FlushHandle { stop, thread: Some(thread) })
    }
}

/// Owner of a flusher thread. `finish` drains what is left and returns the
/// number of records written.
pub struct FlushHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<io::Result<u64>>>,
}

impl FlushHandle {
    pub fn finish(mut self) -> io::Result<u64> {
        self.join()
    }

    fn join(&mut self) -> io::Result<u64> {
        self.stop.store(true, Ordering::Release);
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| io::Error::other("trace flusher panicked"))?,
            None => Ok(0),
        }
    }
}

impl Drop for FlushHandle {
    fn drop(&mut self) {
        let _ = self.join();
    }
}

/// Guard for an open span; the event is recorded when it is dropped or
/// ended, on the thread that started it.
///
/// Only the outermost open span of a thread reads the thread CPU clock;
/// nested spans record `cpu_ns = 0` since their CPU is already inside the
/// enclosing span. The clock is a syscall and spans are many.
pub struct Span {
    tracer: Tracer,
    live: bool,
    outermost: bool,
    ctx: SpanCtx,
    parent: u64,
    layer: Layer,
    name: Cow<'static, str>,
    attrs: Attrs,
    start: Instant,
    cpu_start: u64,
}

impl Span {
    fn start(tracer: &Tracer, ctx: SpanCtx, parent: u64, layer: Layer, name: Cow<'static, str>, attrs: Attrs) -> Span {
        let live = tracer.inner.enabled;
        let outermost = live && OPEN.with(|o| {
            o.set(o.get() + 1);
            o.get() == 1
        });
        Span {
            tracer: tracer.clone(),
            live,
            outermost,
            ctx,
            parent,
            layer,
            name,
            attrs,
            cpu_start: if outermost { thread_cpu_ns() } else { 0 },
            start: Instant::now(),
        }
    }

    pub fn ctx(&self) -> SpanCtx {
        self.ctx
    }

    pub fn id(&self) -> u64 {
        self.ctx.span_id
    }

    pub fn started(&self) -> Instant {
        self.start
    }

    pub fn tracer(&self) -> &Tracer {
        &self.tracer
    }

    pub fn child(&self, layer: Layer, name: impl Into<Cow<'static, str>>, attrs: Attrs) -> Span {
        self.tracer.span(self.ctx, layer, name, attrs)
    }

    pub fn end(self) {}
}

impl Drop for Span {
    fn drop(&mut self) {
        if !self.live {
            return;
        }
        OPEN.with(|o| o.set(o.get().saturating_sub(1)));
        let dur = self.start.elapsed().as_nanos() as u64;
        let cpu = if self.outermost { thread_cpu_ns().saturating_sub(self.cpu_start).min(dur) } else { 0 };
        let tracer = &self.tracer;
        tracer.push(TraceEvent {
            trace_id: self.ctx.trace_id,
            span_id: self.ctx.span_id,
            parent_span_id: self.parent,
            request_id: self.ctx.request_id,
            shard: tracer.inner.shard,
            layer: self.layer,
            name: std::mem::take(&mut self.name),
            start_ns: tracer.wall_ns(self.start),
            dur_ns: dur,
            cpu_ns: cpu,
            attrs: Attrs { ctx: context_id(), ..self.attrs },
        });
    }
}
