use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use bytes::Bytes;

use super::client::fresh_trace_id;
use super::frame::{read_frame, write_frame, Frame, FrameError, MsgType, DEFAULT_MAX_FRAME};
use super::message::{self, ErrorCode, ErrorMessage};
use crate::engine::{EngineError, MainEngine, SparseDispatch, SparseShard};
use crate::trace::{Attrs, Layer, Tracer};

type Handler = Arc<dyn Fn(Frame) -> Frame + Send + Sync>;

/// A running service. Dropping it shuts the service down.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<HashMap<u64, TcpStream>>>,
    accept: Option<JoinHandle<()>>,
    tracer: Tracer,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn tracer(&self) -> &Tracer {
        &self.tracer
    }

    /// Stop accepting, let in-flight requests finish, then close every
    /// connection.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        let Some(accept) = self.accept.take() else { return };
        self.stop.store(true, Ordering::Release);
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(std::net::Ipv4Addr::LOCALHOST.into());
        }
        let _ = TcpStream::connect_timeout(&wake, Duration::from_secs(1));
        for s in self.conns.lock().expect("conn lock").values() {
            let _ = s.shutdown(Shutdown::Read);
        }
        let _ = accept.join();
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

impl std::fmt::Debug for ServerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerHandle").field("addr", &self.addr).field("shard", &self.tracer.shard()).finish()
    }
}

fn spawn_service(listener: TcpListener, tracer: Tracer, handler: Handler) -> std::io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<HashMap<u64, TcpStream>>> = Arc::default();
    let name = format!("{}-accept", tracer.shard());
    let accept = {
        let stop = stop.clone();
        let conns = conns.clone();
        std::thread::Builder::new().name(name).spawn(move || {
            let next_id = AtomicU64::new(0);
            let mut workers = Vec::new();
            for stream in listener.incoming() {
                if stop.load(Ordering::Acquire) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let id = next_id.fetch_add(1, Ordering::Relaxed);
                let Ok(registered) = stream.try_clone() else { continue };
                conns.lock().expect("conn lock").insert(id, registered);
                // A connection accepted while stopping never gets its read
                // side shut, so re-check after registering.
                if stop.load(Ordering::Acquire) {
                    let _ = stream.shutdown(Shutdown::Read);
                }
                let handler = handler.clone();
                let conns = conns.clone();
                workers.push(std::thread::spawn(move || {
                    serve_connection(stream, &handler);
                    conns.lock().expect("conn lock").remove(&id);
                }));
                workers.retain(|w| !w.is_finished());
            }
            for w in workers {
                let _ = w.join();
            }
        })?
    };
    Ok(ServerHandle { addr, stop, conns, accept: Some(accept), tracer })
}

fn serve_connection(stream: TcpStream, handler: &Handler) {
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(stream);
    loop {
        let frame = match read_frame(&mut reader, DEFAULT_MAX_FRAME) {
            Ok(Some(f)) => f,
            Ok(None) => return,
            Err(FrameError::Io(_)) => return,
            Err(e) => {
                // The stream can no longer be trusted; report and hang up.
                let msg = ErrorMessage { code: ErrorCode::MalformedFrame, shard: ErrorMessage::NO_SHARD, message: e.to_string() };
                let _ = write_frame(&mut writer, &Frame::new(MsgType::Error, 0, 0, 0, message::encode_error(&msg)));
                return;
            }
        };
        let resp = handler(frame);
        if write_frame(&mut writer, &resp).is_err() {
            return;
        }
    }
}

fn error_payload(e: &EngineError) -> Bytes {
    message::encode_error(&ErrorMessage::from_engine(e))
}

/// Main-shard service: accepts `RankingReq`, answers `RankingResp` or `Error`.
pub fn serve_main(
    listener: TcpListener,
    engine: MainEngine,
    dispatch: Arc<dyn SparseDispatch>,
    tracer: Tracer,
) -> std::io::Result<ServerHandle> {
    let engine = Arc::new(engine);
    let t = tracer.clone();
    let handler: Handler = Arc::new(move |frame: Frame| {
        let trace_id = if frame.trace_id == 0 { fresh_trace_id() } else { frame.trace_id };
        let rid = frame.request_id;
        if frame.msg_type != MsgType::RankingReq {
            let e = EngineError::InvalidRequest(format!("main shard cannot serve {:?}", frame.msg_type));
            return Frame::new(MsgType::Error, trace_id, 0, rid, error_payload(&e));
        }
        let root = t.root(trace_id, rid, 0, Layer::RpcService, "request", Attrs::default());
        let de = root.child(Layer::RpcSerde, "deserialize_request", Attrs::default());
        let decoded = message::decode_ranking_request(rid, &frame.payload);
        drop(de);
        let result = match decoded {
            Ok(req) => engine.execute(&req, dispatch.as_ref(), &t, root.ctx()),
            Err(e) => Err(EngineError::InvalidRequest(e.to_string())),
        };
        let ser = root.child(Layer::RpcSerde, "serialize_response", Attrs::default());
        let (msg_type, payload) = match &result {
            Ok(scores) => (MsgType::RankingResp, message::encode_scores(scores)),
            Err(e) => (MsgType::Error, error_payload(e)),
        };
        drop(ser);
        drop(root);
        Frame::new(msg_type, trace_id, 0, rid, payload)
    });
    spawn_service(listener, tracer, handler)
}

/// Sparse-shard service: accepts `LookupReq`, answers `LookupResp` or
/// `Error`. `injected_delay` is slept after each request is read, before
/// any span opens, so it shows up as network time.
pub fn serve_sparse(
    listener: TcpListener,
    shard: SparseShard,
    injected_delay: Duration,
    tracer: Tracer,
) -> std::io::Result<ServerHandle> {
    let shard = Arc::new(shard);
    let t = tracer.clone();
    let handler: Handler = Arc::new(move |frame: Frame| {
        if !injected_delay.is_zero() {
            std::thread::sleep(injected_delay);
        }
        let (trace_id, rid) = (frame.trace_id, frame.request_id);
        if frame.msg_type != MsgType::LookupReq {
            let e = EngineError::InvalidRequest(format!("sparse shard cannot serve {:?}", frame.msg_type));
            return Frame::new(MsgType::Error, trace_id, 0, rid, error_payload(&e));
        }
        let root = t.root(trace_id, rid, frame.parent_span_id, Layer::RpcService, "serve_lookup", Attrs::default());
        let de = root.child(Layer::RpcSerde, "deserialize_lookup", Attrs::default());
        let decoded = message::decode_lookup_request(&frame.payload);
        drop(de);
        let result = match decoded {
            Ok(req) => shard.execute(&req, &t, root.ctx()),
            Err(e) => Err(EngineError::InvalidRequest(e.to_string())),
        };
        let ser = root.child(Layer::RpcSerde, "serialize_response", Attrs::default());
        let (msg_type, payload) = match &result {
            Ok(resp) => (MsgType::LookupResp, message::encode_lookup_response(resp)),
            Err(e) => (MsgType::Error, error_payload(e)),
        };
        drop(ser);
        drop(root);
        Frame::new(msg_type, trace_id, 0, rid, payload)
    });
    spawn_service(listener, tracer, handler)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{BatchSize, EngineConfig, LocalDispatch};
    use crate::model::{generate_model, Archetype, SizeBudget};
    use crate::planner::{plan_load_balanced, plan_singular};
    use crate::replay::{generate_requests, WorkloadProfile};
    use crate::trace::ShardTag;
    use crate::transport::{MainClient, RemoteDispatch, TransportError};

    fn loopback() -> TcpListener {
        TcpListener::bind("127.0.0.1:0").unwrap()
    }

    struct Cluster {
        main: ServerHandle,
        sparse: Vec<Option<ServerHandle>>,
        reference: Vec<Vec<f32>>,
        requests: Vec<crate::request::RankingRequest>,
    }

    fn cluster(k: u32, deadline: Duration) -> Cluster {
        let spec = generate_model(Archetype::LongTail, SizeBudget::mib(1), 3).unwrap();
        let h = spec.header();
        let plan = plan_load_balanced(&h, &h.profiles(), k, None).unwrap();
        let profile = WorkloadProfile { candidates: crate::replay::CountDist::Constant { value: 24 }, ..Default::default() };
        let requests = generate_requests(&h, &profile, 8).unwrap();
        let config = EngineConfig::new(BatchSize::fixed(8)).workers(2);
        let singular = MainEngine::from_spec(&spec, plan_singular(&h), config).unwrap();
        let none = LocalDispatch::new(Vec::new());
        let tracer = Tracer::disabled(ShardTag::Main);
        let root = crate::trace::SpanCtx { trace_id: 1, span_id: 0, request_id: 0 };
        let reference = requests.iter().map(|r| singular.execute(r, &none, &tracer, root).unwrap()).collect();

        let sparse: Vec<_> = (0..k)
            .map(|s| {
                let shard = SparseShard::from_spec(s, &plan, &spec).unwrap();
                Some(serve_sparse(loopback(), shard, Duration::ZERO, Tracer::disabled(ShardTag::Sparse(s))).unwrap())
            })
            .collect();
        let addrs: Vec<String> = sparse.iter().map(|s| s.as_ref().unwrap().local_addr().to_string()).collect();
        let dispatch = RemoteDispatch::new(&addrs).unwrap().with_deadline(deadline);
        let engine = MainEngine::from_spec(&spec, plan, config).unwrap();
        let main = serve_main(loopback(), engine, Arc::new(dispatch), Tracer::disabled(ShardTag::Main)).unwrap();
        Cluster { main, sparse, reference, requests }
    }

    #[test]
    fn loopback_scores_match_singular() {
        let c = cluster(2, Duration::from_secs(5));
        let mut client = MainClient::connect(&c.main.local_addr().to_string()).unwrap();
        for (req, want) in c.requests.iter().zip(&c.reference) {
            let got = client.rank(req).unwrap();
            assert_eq!(got.request_id, req.request_id);
            assert_ne!(got.trace_id, 0);
            assert_eq!(&got.scores, want);
        }
    }

    #[test]
    fn pipelined_matches_fresh_connections() {
        let c = cluster(2, Duration::from_secs(5));
        let addr = c.main.local_addr().to_string();
        let mut pipelined = MainClient::connect(&addr).unwrap();
        for r in &c.requests {
            pipelined.send(r, 0).unwrap();
        }
        for (req, want) in c.requests.iter().zip(&c.reference) {
            let got = pipelined.recv().unwrap();
            assert_eq!(got.request_id, req.request_id);
            assert_eq!(&got.scores, want);
            let fresh = MainClient::connect(&addr).unwrap().rank(req).unwrap();
            assert_eq!(fresh.scores, got.scores);
        }
    }

    #[test]
    fn dead_shard_reports_unavailable_and_main_survives() {
        let mut c = cluster(2, Duration::from_secs(5));
        let addr = c.main.local_addr().to_string();
        let mut client = MainClient::connect(&addr).unwrap();
        client.rank(&c.requests[0]).unwrap();
        c.sparse[1].take().unwrap().shutdown();
        let err = client.rank(&c.requests[1]).unwrap_err();
        match err {
            TransportError::Remote(m) => {
                assert_eq!(m.code, ErrorCode::ShardUnavailable);
                assert_eq!(m.shard, 1);
            }
            other => panic!("unexpected {other}"),
        }
        // Still serving on the same and on new connections.
        assert!(client.rank(&c.requests[2]).is_err());
        assert!(MainClient::connect(&addr).unwrap().rank(&c.requests[2]).is_err());
    }

    #[test]
    fn zero_deadline_times_out_immediately() {
        let c = cluster(2, Duration::ZERO);
        let mut client = MainClient::connect(&c.main.local_addr().to_string()).unwrap();
        let t = std::time::Instant::now();
        match client.rank(&c.requests[0]).unwrap_err() {
            TransportError::Remote(m) => assert_eq!(m.code, ErrorCode::RpcTimeout),
            other => panic!("unexpected {other}"),
        }
        assert!(t.elapsed() < Duration::from_secs(1));
    }

    #[test]
    fn malformed_frame_gets_error_then_close() {
        let c = cluster(1, Duration::from_secs(5));
        let mut s = TcpStream::connect(c.main.local_addr()).unwrap();
        let mut bad = Frame::new(MsgType::RankingReq, 1, 0, 1, Bytes::new()).encode().to_vec();
        bad[4] = 42;
        std::io::Write::write_all(&mut s, &bad).unwrap();
        let f = read_frame(&mut s, DEFAULT_MAX_FRAME).unwrap().unwrap();
        assert_eq!(f.msg_type, MsgType::Error);
        assert_eq!(message::decode_error(&f.payload).unwrap().code, ErrorCode::MalformedFrame);
        assert!(read_frame(&mut s, DEFAULT_MAX_FRAME).unwrap().is_none());
    }
}
