#![allow(dead_code)]

use std::path::PathBuf;

use shardrec::engine::{LookupEntry, PartialEntry, SparseLookupRequest, SparseLookupResponse};
use shardrec::request::{Candidate, RankingRequest, SparseFeature};
use shardrec::trace::{Attrs, Layer, ShardTag, TraceEvent};
use shardrec::transport::message::{
    encode_error, encode_lookup_request, encode_lookup_response, encode_ranking_request, encode_scores,
};
use shardrec::transport::{ErrorCode, ErrorMessage, Frame, MsgType};

pub const TRACE_ID: u128 = 0x0123_4567_89ab_cdef_fedc_ba98_7654_3210;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden_lookup_request() -> SparseLookupRequest {
    SparseLookupRequest {
        net_id: 1,
        batch_index: 2,
        entries: vec![
            LookupEntry { table_id: 3, partition_index: 1, lengths: vec![2, 0, 1], indices: vec![5, 9, 7] },
            LookupEntry { table_id: 8, partition_index: 0, lengths: vec![1, 1, 1], indices: vec![0, 1, 2] },
        ],
    }
}

pub fn golden_lookup_response() -> SparseLookupResponse {
    SparseLookupResponse {
        entries: vec![PartialEntry {
            table_id: 3,
            partition_index: 1,
            item_lens: vec![2, 2, 2],
            values: vec![0.5, -1.25, 0.0, 0.0, 3.0, -0.0625],
        }],
    }
}

pub fn golden_ranking_request() -> RankingRequest {
    RankingRequest {
        request_id: 42,
        user_dense: vec![0.25, -0.5],
        user_sparse: vec![SparseFeature { table_id: 0, indices: vec![1, 2, 3] }],
        candidates: vec![
            Candidate { dense: vec![1.0], sparse: vec![SparseFeature { table_id: 4, indices: vec![7] }] },
            Candidate { dense: vec![-2.0], sparse: vec![SparseFeature { table_id: 4, indices: vec![] }] },
        ],
    }
}

pub fn golden_error() -> ErrorMessage {
    ErrorMessage { code: ErrorCode::ShardUnavailable, shard: 3, message: "shard 3 unavailable".into() }
}

/// One frame of each message type, in wire order.
pub fn golden_frames() -> Vec<Frame> {
    vec![
        Frame::new(MsgType::RankingReq, TRACE_ID, 0, 42, encode_ranking_request(&golden_ranking_request())),
        Frame::new(MsgType::LookupReq, TRACE_ID, 0x1122_3344_5566_7788, 42, encode_lookup_request(&golden_lookup_request())),
        Frame::new(MsgType::LookupResp, TRACE_ID, 0x1122_3344_5566_7788, 42, encode_lookup_response(&golden_lookup_response())),
        Frame::new(MsgType::RankingResp, TRACE_ID, 0, 42, encode_scores(&[0.125, 0.75])),
        Frame::new(MsgType::Error, TRACE_ID, 0, 43, encode_error(&golden_error())),
    ]
}

fn ev(span: u64, parent: u64, shard: ShardTag, layer: Layer, name: &'static str, start: u64, dur: u64, attrs: Attrs) -> TraceEvent {
    TraceEvent {
        trace_id: TRACE_ID,
        span_id: span,
        parent_span_id: parent,
        request_id: 42,
        shard,
        layer,
        name: name.into(),
        start_ns: start,
        dur_ns: dur,
        cpu_ns: dur / 2,
        attrs,
    }
}

pub fn golden_events() -> Vec<TraceEvent> {
    vec![
        ev(0x1000_0000_0000_0001, 0, ShardTag::Main, Layer::RpcService, "request", 1_700_000_000_000_000_000, 9_000_000, Attrs { ctx: 7, ..Attrs::default() }),
        ev(0x1000_0000_0000_0002, 0x1000_0000_0000_0001, ShardTag::Main, Layer::NetOverhead, "batch", 1_700_000_000_000_100_000, 8_000_000, Attrs { ctx: 9, ..Attrs::default() }.batch(0)),
        ev(0x1000_0000_0000_0003, 0x1000_0000_0000_0002, ShardTag::Main, Layer::RpcWait, "rpc_op", 1_700_000_000_000_200_000, 3_000_000, Attrs::default().net(1).batch(0).peer(2)),
        ev(0x4000_0000_0000_0001, 0x1000_0000_0000_0003, ShardTag::Sparse(2), Layer::RpcService, "serve_lookup", 1_700_000_000_000_300_000, 2_500_000, Attrs { ctx: 11, ..Attrs::default() }),
        ev(0x4000_0000_0000_0002, 0x4000_0000_0000_0001, ShardTag::Sparse(2), Layer::SparseOp, "sls", 1_700_000_000_000_310_000, 1_000_000, Attrs { ctx: 11, ..Attrs::default() }.table(3)),
    ]
}
