use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::os::unix::thread::JoinHandleExt;
use std::sync::Mutex;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use bytes::Bytes;

use super::frame::{read_frame, write_frame, Frame, FrameError, MsgType, DEFAULT_MAX_FRAME};
use super::message::{self, decode_error};
use super::{Topology, TransportError};
use crate::engine::{EngineError, ShardCall, SparseDispatch, SparseLookupResponse, DEFAULT_RPC_DEADLINE};
use crate::planner::ShardId;
use crate::request::RankingRequest;
use crate::trace::{context_id, cpu_clock_ns, Attrs, Layer, SpanCtx, Tracer};

struct Arrival {
    frame: Result<Option<Frame>, FrameError>,
    at: Instant,
    /// The reader's execution context.
    ctx: u64,
}

/// A connection whose responses are read by a dedicated thread that stamps
/// each frame with its arrival time.
struct Conn {
    writer: BufWriter<TcpStream>,
    rx: Receiver<Arrival>,
    /// Held so the reader's CPU clock stays valid.
    _reader: JoinHandle<()>,
    reader_clock: Option<libc::clockid_t>,
    /// Reader CPU already attributed.
    reader_cpu: u64,
}

impl Conn {
    fn open(addr: SocketAddr, connect_timeout: Duration) -> std::io::Result<Conn> {
        let stream = TcpStream::connect_timeout(&addr, connect_timeout)?;
        stream.set_nodelay(true)?;
        let mut read_half = BufReader::new(stream.try_clone()?);
        let (tx, rx) = mpsc::channel();
        let reader = std::thread::Builder::new().name("rpc-reader".into()).spawn(move || {
            let ctx = context_id();
            loop {
                let frame = read_frame(&mut read_half, DEFAULT_MAX_FRAME);
                let at = Instant::now();
                let last = !matches!(frame, Ok(Some(_)));
                if tx.send(Arrival { frame, at, ctx }).is_err() || last {
                    break;
                }
            }
        })?;
        // Reading the clock on the reader itself stalls hand-offs on a busy
        // host, so the caller reads it from outside.
        let mut clock: libc::clockid_t = 0;
        // SAFETY: the thread is not joined or detached while `reader` lives.
        let rc = unsafe { libc::pthread_getcpuclockid(reader.as_pthread_t(), &mut clock) };
        let reader_clock = (rc == 0).then_some(clock);
        Ok(Conn { writer: BufWriter::new(stream), rx, _reader: reader, reader_clock, reader_cpu: 0 })
    }

    /// Pooled connections with anything already queued (EOF, a stray frame)
    /// are stale.
    fn is_idle(&self) -> bool {
        matches!(self.rx.try_recv(), Err(mpsc::TryRecvError::Empty))
    }

    /// Reader CPU since the last call.
    fn reader_cpu_delta(&mut self) -> u64 {
        let Some(clock) = self.reader_clock else { return 0 };
        let now = cpu_clock_ns(clock);
        let delta = now.saturating_sub(self.reader_cpu);
        self.reader_cpu = now.max(self.reader_cpu);
        delta
    }
}

impl Drop for Conn {
    fn drop(&mut self) {
        let _ = self.writer.get_ref().shutdown(std::net::Shutdown::Both);
    }
}

/// Reaches sparse shards over TCP, one pooled connection per in-flight call.
pub struct RemoteDispatch {
    endpoints: Vec<SocketAddr>,
    pools: Vec<Mutex<Vec<Conn>>>,
    deadline: Duration,
}

impl std::fmt::Debug for RemoteDispatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteDispatch").field("endpoints", &self.endpoints).field("deadline", &self.deadline).finish()
    }
}

fn resolve(addr: &str) -> Result<SocketAddr, TransportError> {
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| TransportError::Topology(format!("`{addr}` resolves to no address")))
}

impl RemoteDispatch {
    pub fn new(endpoints: &[String]) -> Result<Self, TransportError> {
        let endpoints = endpoints.iter().map(|a| resolve(a)).collect::<Result<Vec<_>, _>>()?;
        let pools = endpoints.iter().map(|_| Mutex::new(Vec::new())).collect();
        Ok(RemoteDispatch { endpoints, pools, deadline: DEFAULT_RPC_DEADLINE })
    }

    pub fn from_topology(topo: &Topology) -> Result<Self, TransportError> {
        Self::new(&topo.sparse)
    }

    /// Per-call deadline, measured from the moment the call is issued.
    pub fn with_deadline(mut self, deadline: Duration) -> Self {
        self.deadline = deadline;
        self
    }

    pub fn deadline(&self) -> Duration {
        self.deadline
    }

    fn checkout(&self, shard: ShardId) -> Result<Conn, EngineError> {
        let pool = self.pools.get(shard as usize).ok_or_else(|| EngineError::ShardUnavailable {
            shard,
            reason: "no endpoint for shard".into(),
        })?;
        while let Some(c) = pool.lock().expect("pool lock").pop() {
            if c.is_idle() {
                return Ok(c);
            }
        }
        Conn::open(self.endpoints[shard as usize], self.deadline.max(Duration::from_millis(100)))
            .map_err(|e| EngineError::ShardUnavailable { shard, reason: format!("connect: {e}") })
    }

    fn checkin(&self, shard: ShardId, conn: Conn) {
        self.pools[shard as usize].lock().expect("pool lock").push(conn);
    }
}

struct InFlight {
    shard: ShardId,
    span_id: u64,
    sent: Instant,
    conn: Conn,
}

impl SparseDispatch for RemoteDispatch {
    fn dispatch(
        &self,
        calls: &[ShardCall],
        tracer: &Tracer,
        parent: SpanCtx,
    ) -> Result<Vec<SparseLookupResponse>, EngineError> {
        let Some(first) = calls.first() else { return Ok(Vec::new()) };
        if self.deadline.is_zero() {
            return Err(EngineError::RpcTimeout { shard: first.shard_id, deadline: self.deadline });
        }
        let attrs = Attrs::default().net(first.request.net_id).batch(first.request.batch_index);

        let ser = tracer.span(parent, Layer::RpcSerde, "serialize_lookup", attrs);
        let payloads: Vec<Bytes> = calls.iter().map(|c| message::encode_lookup_request(&c.request)).collect();
        drop(ser);

        let wait = tracer.span(parent, Layer::RpcWait, "rpc_wait", attrs);
        let wait_ctx = wait.ctx();
        // Issue everything before awaiting anything.
        let mut inflight = Vec::with_capacity(calls.len());
        for (call, payload) in calls.iter().zip(payloads) {
            let mut conn = self.checkout(call.shard_id)?;
            let span_id = tracer.new_span_id();
            let frame = Frame::new(MsgType::LookupReq, parent.trace_id, span_id, parent.request_id, payload);
            let sent = Instant::now();
            write_frame(&mut conn.writer, &frame).map_err(|e| EngineError::ShardUnavailable {
                shard: call.shard_id,
                reason: format!("send: {e}"),
            })?;
            inflight.push(InFlight { shard: call.shard_id, span_id, sent, conn });
        }
        let mut frames = Vec::with_capacity(inflight.len());
        for mut f in inflight {
            let left = self.deadline.saturating_sub(f.sent.elapsed());
            let (frame, at, ctx) = match f.conn.rx.recv_timeout(left) {
                Ok(Arrival { frame: Ok(Some(frame)), at, ctx }) => (frame, at, ctx),
                Ok(Arrival { frame: Ok(None), .. }) | Err(RecvTimeoutError::Disconnected) => {
                    return Err(EngineError::ShardUnavailable { shard: f.shard, reason: "connection closed".into() })
                }
                Ok(Arrival { frame: Err(e), .. }) => {
                    return Err(EngineError::ShardUnavailable { shard: f.shard, reason: format!("receive: {e}") })
                }
                Err(RecvTimeoutError::Timeout) => {
                    return Err(EngineError::RpcTimeout { shard: f.shard, deadline: self.deadline })
                }
            };
            let cpu = if tracer.is_enabled() { f.conn.reader_cpu_delta() } else { 0 };
            let op = Attrs { ctx, ..attrs.peer(f.shard) };
            tracer.record_interval(wait_ctx, f.span_id, Layer::RpcWait, "rpc_op", f.sent, at, cpu, op);
            if frame.request_id != parent.request_id || frame.trace_id != parent.trace_id {
                return Err(EngineError::RemoteExecution {
                    shard: f.shard,
                    message: format!("response for request {} on request {}", frame.request_id, parent.request_id),
                });
            }
            self.checkin(f.shard, f.conn);
            frames.push((f.shard, frame));
        }
        drop(wait);

        let _de = tracer.span(parent, Layer::RpcSerde, "deserialize_lookup_response", attrs);
        frames
            .into_iter()
            .map(|(shard, frame)| match frame.msg_type {
                MsgType::LookupResp => message::decode_lookup_response(&frame.payload)
                    .map_err(|e| EngineError::RemoteExecution { shard, message: e.to_string() }),
                MsgType::Error => {
                    let msg = decode_error(&frame.payload)
                        .map(|m| m.message)
                        .unwrap_or_else(|e| format!("undecodable error frame: {e}"));
                    Err(EngineError::RemoteExecution { shard, message: msg })
                }
                other => Err(EngineError::RemoteExecution { shard, message: format!("unexpected {other:?} frame") }),
            })
            .collect()
    }
}

/// Scores plus the trace id the main shard recorded them under.
#[derive(Debug, Clone, PartialEq)]
pub struct RankResponse {
    pub request_id: u64,
    pub trace_id: u128,
    pub scores: Vec<f32>,
}

/// Blocking client for the main shard. Requests may be pipelined with
/// [`MainClient::send`] / [`MainClient::recv`]; responses come back in order.
pub struct MainClient {
    tx: RankSender,
    rx: RankReceiver,
}

/// Write half of a [`MainClient`].
pub struct RankSender {
    writer: BufWriter<TcpStream>,
}

/// Read half of a [`MainClient`].
pub struct RankReceiver {
    reader: BufReader<TcpStream>,
}

impl MainClient {
    pub fn connect(addr: &str) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(resolve(addr)?)?;
        stream.set_nodelay(true)?;
        Ok(MainClient {
            rx: RankReceiver { reader: BufReader::new(stream.try_clone()?) },
            tx: RankSender { writer: BufWriter::new(stream) },
        })
    }

    pub fn set_timeout(&self, t: Option<Duration>) -> Result<(), TransportError> {
        self.rx.set_timeout(t)
    }

    /// Send and wait. A zero `trace_id` gets a fresh random one.
    pub fn rank(&mut self, req: &RankingRequest) -> Result<RankResponse, TransportError> {
        self.rank_traced(req, 0)
    }

    pub fn rank_traced(&mut self, req: &RankingRequest, trace_id: u128) -> Result<RankResponse, TransportError> {
        self.send(req, trace_id)?;
        let resp = self.recv()?;
        if resp.request_id != req.request_id {
            return Err(TransportError::Protocol(format!(
                "response for request {} while awaiting {}",
                resp.request_id, req.request_id
            )));
        }
        Ok(resp)
    }

    pub fn send(&mut self, req: &RankingRequest, trace_id: u128) -> Result<u128, TransportError> {
        self.tx.send(req, trace_id)
    }

    pub fn recv(&mut self) -> Result<RankResponse, TransportError> {
        self.rx.recv()
    }

    pub fn into_split(self) -> (RankSender, RankReceiver) {
        (self.tx, self.rx)
    }
}

impl RankSender {
    /// Returns the trace id the request was sent under; zero picks a fresh
    /// random one.
    pub fn send(&mut self, req: &RankingRequest, trace_id: u128) -> Result<u128, TransportError> {
        let trace_id = if trace_id == 0 { fresh_trace_id() } else { trace_id };
        let frame = Frame::new(MsgType::RankingReq, trace_id, 0, req.request_id, message::encode_ranking_request(req));
        self.writer.write_all(&frame.encode())?;
        self.writer.flush()?;
        Ok(trace_id)
    }
}

impl RankReceiver {
    pub fn set_timeout(&self, t: Option<Duration>) -> Result<(), TransportError> {
        self.reader.get_ref().set_read_timeout(t)?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<RankResponse, TransportError> {
        let frame = read_frame(&mut self.reader, DEFAULT_MAX_FRAME).map_err(|e| match e {
            FrameError::Io(io)
                if matches!(io.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
            {
                TransportError::Timeout(self.reader.get_ref().read_timeout().ok().flatten().unwrap_or_default())
            }
            other => other.into(),
        })?;
        let frame = frame.ok_or_else(|| TransportError::Protocol("main shard closed the connection".into()))?;
        match frame.msg_type {
            MsgType::RankingResp => Ok(RankResponse {
                request_id: frame.request_id,
                trace_id: frame.trace_id,
                scores: message::decode_scores(&frame.payload)?,
            }),
            MsgType::Error => Err(TransportError::Remote(decode_error(&frame.payload)?)),
            other => Err(TransportError::Protocol(format!("unexpected {other:?} frame"))),
        }
    }
}

pub(crate) fn fresh_trace_id() -> u128 {
    loop {
        let t: u128 = rand::random();
        if t != 0 {
            return t;
        }
    }
}
