use std::sync::mpsc;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::{Provenance, ReplayError, ReplayMode, RunLog, RunLogEntry, WorkloadProfile};
use crate::request::RankingRequest;
use crate::transport::{MainClient, TransportError};

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOptions {
    pub mode: ReplayMode,
    pub target_qps: Option<f64>,
    /// Connections used to keep open-loop requests in flight.
    pub connections: usize,
    /// Longest wait for any single response.
    pub timeout: Duration,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions { mode: ReplayMode::Serial, target_qps: None, connections: 16, timeout: Duration::from_secs(30) }
    }
}

impl ReplayOptions {
    pub fn serial() -> Self {
        Self::default()
    }

    pub fn open_loop(qps: f64) -> Self {
        ReplayOptions { mode: ReplayMode::OpenLoop, target_qps: Some(qps), ..Self::default() }
    }

    pub fn from_profile(p: &WorkloadProfile) -> Self {
        ReplayOptions { mode: p.mode, target_qps: p.target_qps, ..Self::default() }
    }
}

fn ns_since(start: Instant, t: Instant) -> u64 {
    t.saturating_duration_since(start).as_nanos() as u64
}

fn failed(req: &RankingRequest, scheduled: u64, sent: u64, received: u64, err: &dyn std::fmt::Display) -> RunLogEntry {
    RunLogEntry {
        request_id: req.request_id,
        trace_id: 0,
        scheduled_ns: scheduled,
        sent_ns: sent,
        received_ns: received,
        ok: false,
        error: err.to_string(),
    }
}

fn connect(endpoint: &str, timeout: Duration) -> Result<MainClient, TransportError> {
    let c = MainClient::connect(endpoint)?;
    c.set_timeout(Some(timeout))?;
    Ok(c)
}

/// Drive `requests` at the main shard. Per-request failures are logged and
/// the run carries on; the log always holds one entry per request, in
/// request order.
pub fn replay(
    requests: &[RankingRequest],
    endpoint: &str,
    opts: &ReplayOptions,
    provenance: Provenance,
) -> Result<RunLog, ReplayError> {
    let entries = match opts.mode {
        ReplayMode::Serial => run_serial(requests, endpoint, opts),
        ReplayMode::OpenLoop => {
            let qps = opts.target_qps.filter(|q| *q > 0.0 && q.is_finite()).ok_or_else(|| {
                ReplayError::ProfileMismatch("open-loop mode needs target_qps > 0".into())
            })?;
            run_open_loop(requests, endpoint, opts, qps)
        }
    };
    Ok(RunLog { provenance, mode: opts.mode, target_qps: opts.target_qps, entries })
}

fn run_serial(requests: &[RankingRequest], endpoint: &str, opts: &ReplayOptions) -> Vec<RunLogEntry> {
    let start = Instant::now();
    let mut client: Option<MainClient> = None;
    let mut out = Vec::with_capacity(requests.len());
    for req in requests {
        let sent = Instant::now();
        let result = match client.as_mut() {
            Some(c) => c.rank(req),
            None => connect(endpoint, opts.timeout).and_then(|c| client.insert(c).rank(req)),
        };
        let received = Instant::now();
        let (s, r) = (ns_since(start, sent), ns_since(start, received));
        out.push(match result {
            Ok(resp) => RunLogEntry {
                request_id: req.request_id,
                trace_id: resp.trace_id,
                scheduled_ns: s,
                sent_ns: s,
                received_ns: r,
                ok: true,
                error: String::new(),
            },
            Err(e) => {
                // The connection is only trusted after an orderly error reply.
                if !matches!(e, TransportError::Remote(_)) {
                    client = None;
                }
                failed(req, s, s, r, &e)
            }
        });
    }
    out
}

struct Pending {
    index: usize,
    trace_id: u128,
    scheduled_ns: u64,
    sent_ns: u64,
}

fn run_open_loop(requests: &[RankingRequest], endpoint: &str, opts: &ReplayOptions, qps: f64) -> Vec<RunLogEntry> {
    let n_conns = opts.connections.clamp(1, requests.len().max(1));
    let slots: Mutex<Vec<Option<RunLogEntry>>> = Mutex::new(vec![None; requests.len()]);
    let put = |i: usize, e: RunLogEntry| slots.lock().expect("slot lock")[i] = Some(e);
    let start = Instant::now();
    std::thread::scope(|s| {
        let mut senders = Vec::with_capacity(n_conns);
        for _ in 0..n_conns {
            match connect(endpoint, opts.timeout) {
                Ok(client) => {
                    let (tx, mut rx) = client.into_split();
                    let (ptx, prx) = mpsc::channel::<Pending>();
                    let put = &put;
                    s.spawn(move || {
                        let mut broken: Option<String> = None;
                        for p in prx {
                            let req = &requests[p.index];
                            if let Some(why) = &broken {
                                let now = ns_since(start, Instant::now());
                                put(p.index, failed(req, p.scheduled_ns, p.sent_ns, now, why));
                                continue;
                            }
                            let r = rx.recv();
                            let now = ns_since(start, Instant::now());
                            let entry = match r {
                                Ok(resp) if resp.request_id == req.request_id => RunLogEntry {
                                    request_id: req.request_id,
                                    trace_id: p.trace_id,
                                    scheduled_ns: p.scheduled_ns,
                                    sent_ns: p.sent_ns,
                                    received_ns: now,
                                    ok: true,
                                    error: String::new(),
                                },
                                Ok(resp) => {
                                    let why = format!("got response for request {}", resp.request_id);
                                    broken = Some(why.clone());
                                    failed(req, p.scheduled_ns, p.sent_ns, now, &why)
                                }
                                Err(e @ TransportError::Remote(_)) => failed(req, p.scheduled_ns, p.sent_ns, now, &e),
                                Err(e) => {
                                    broken = Some(e.to_string());
                                    failed(req, p.scheduled_ns, p.sent_ns, now, &e)
                                }
                            };
                            put(p.index, entry);
                        }
                    });
                    senders.push(Ok((tx, ptx)));
                }
                Err(e) => senders.push(Err(e.to_string())),
            }
        }

        for (i, req) in requests.iter().enumerate() {
            let due = start + Duration::from_secs_f64(i as f64 / qps);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
            let scheduled = ns_since(start, due);
            let conn = &mut senders[i % n_conns];
            let sent_at = Instant::now();
            let sent = ns_since(start, sent_at);
            let outcome = match conn {
                Ok((tx, ptx)) => match tx.send(req, 0) {
                    Ok(trace_id) => {
                        let _ = ptx.send(Pending { index: i, trace_id, scheduled_ns: scheduled, sent_ns: sent });
                        Ok(())
                    }
                    Err(e) => Err(e.to_string()),
                },
                Err(why) => Err(why.clone()),
            };
            if let Err(why) = outcome {
                put(i, failed(req, scheduled, sent, sent, &why));
                *conn = Err(why);
            }
        }
        // Dropping the senders closes each pending channel so receivers
        // finish once their queue drains.
        drop(senders);
    });
    slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .zip(requests)
        .map(|(e, req)| e.unwrap_or_else(|| failed(req, 0, 0, 0, &"request was never accounted for")))
        .collect()
}
