//! Message bodies. All integers and floats are little-endian; indices
//! travel as u32.
//!
//! ```text
//! RankingReq   u32 n, f32[n] user_dense; features user_sparse;
//!              u32 m, m × { u32 n, f32[n] dense; features sparse }
//! features     u32 k, k × { u32 table_id, u32 n, u32[n] indices }
//! RankingResp  u32 n, f32[n] scores
//! LookupReq    u32 net_id, u32 batch_index, u32 k,
//!              k × { u32 table_id, u32 partition, u32 n_items, u32 n_indices,
//!                    u32[n_items] lengths, u32[n_indices] indices }
//! LookupResp   u32 k, k × { u32 table_id, u32 partition, u32 n_items, u32 n_floats,
//!                           u32[n_items] item_lens, f32[n_floats] values }
//! Error        u16 code, u32 shard, u32 n, utf8[n] message
//! ```

use bytes::{BufMut, Bytes, BytesMut};

use super::FrameError;
use crate::engine::{EngineError, LookupEntry, PartialEntry, SparseLookupRequest, SparseLookupResponse};
use crate::request::{Candidate, RankingRequest, SparseFeature};

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        if self.buf.len() < n {
            return Err(FrameError::Malformed(format!("{} payload truncated", self.what)));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16, FrameError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    /// A count whose elements take at least `elem` bytes each; rejects
    /// counts the remaining buffer cannot possibly hold.
    fn count(&mut self, elem: usize) -> Result<usize, FrameError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem) > self.buf.len() {
            return Err(FrameError::Malformed(format!("{} payload claims {n} elements past its end", self.what)));
        }
        Ok(n)
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>, FrameError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| FrameError::Malformed("count overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FrameError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| FrameError::Malformed("count overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn finish(self) -> Result<(), FrameError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(FrameError::Malformed(format!("{} trailing bytes after {} payload", self.buf.len(), self.what)))
        }
    }
}

fn put_f32s(b: &mut BytesMut, v: &[f32]) {
    b.put_u32_le(v.len() as u32);
    for x in v {
        b.put_f32_le(*x);
    }
}

fn put_features(b: &mut BytesMut, fs: &[SparseFeature]) {
    b.put_u32_le(fs.len() as u32);
    for f in fs {
        b.put_u32_le(f.table_id);
        b.put_u32_le(f.indices.len() as u32);
        for i in &f.indices {
            b.put_u32_le(*i);
        }
    }
}

fn get_features(r: &mut Reader) -> Result<Vec<SparseFeature>, FrameError> {
    let k = r.count(8)?;
    (0..k)
        .map(|_| {
            let table_id = r.u32()?;
            let n = r.count(4)?;
            Ok(SparseFeature { table_id, indices: r.u32s(n)? })
        })
        .collect()
}

pub fn encode_ranking_request(req: &RankingRequest) -> Bytes {
    let mut b = BytesMut::with_capacity(16 + req.total_lookups() * 4);
    put_f32s(&mut b, &req.user_dense);
    put_features(&mut b, &req.user_sparse);
    b.put_u32_le(req.candidates.len() as u32);
    for c in &req.candidates {
        put_f32s(&mut b, &c.dense);
        put_features(&mut b, &c.sparse);
    }
    b.freeze()
}

/// The request id lives in the frame header and is passed in.
pub fn decode_ranking_request(request_id: u64, payload: &[u8]) -> Result<RankingRequest, FrameError> {
    let mut r = Reader::new(payload, "ranking request");
    let n = r.count(4)?;
    let user_dense = r.f32s(n)?;
    let user_sparse = get_features(&mut r)?;
    let m = r.count(8)?;
    let mut candidates = Vec::with_capacity(m);
    for _ in 0..m {
        let n = r.count(4)?;
        let dense = r.f32s(n)?;
        candidates.push(Candidate { dense, sparse: get_features(&mut r)? });
    }
    r.finish()?;
    Ok(RankingRequest { request_id, user_dense, user_sparse, candidates })
}

pub fn encode_scores(scores: &[f32]) -> Bytes {
    let mut b = BytesMut::with_capacity(4 + scores.len() * 4);
    put_f32s(&mut b, scores);
    b.freeze()
}

pub fn decode_scores(payload: &[u8]) -> Result<Vec<f32>, FrameError> {
    let mut r = Reader::new(payload, "ranking response");
    let n = r.count(4)?;
    let v = r.f32s(n)?;
    r.finish()?;
    Ok(v)
}

pub fn encode_lookup_request(req: &SparseLookupRequest) -> Bytes {
    let size: usize = req.entries.iter().map(|e| 16 + 4 * (e.lengths.len() + e.indices.len())).sum();
    let mut b = BytesMut::with_capacity(12 + size);
    b.put_u32_le(req.net_id);
    b.put_u32_le(req.batch_index);
    b.put_u32_le(req.entries.len() as u32);
    for e in &req.entries {
        b.put_u32_le(e.table_id);
        b.put_u32_le(e.partition_index);
        b.put_u32_le(e.lengths.len() as u32);
        b.put_u32_le(e.indices.len() as u32);
        for x in e.lengths.iter().chain(&e.indices) {
            b.put_u32_le(*x);
        }
    }
    b.freeze()
}

pub fn decode_lookup_request(payload: &[u8]) -> Result<SparseLookupRequest, FrameError> {
    let mut r = Reader::new(payload, "lookup request");
    let net_id = r.u32()?;
    let batch_index = r.u32()?;
    let k = r.count(16)?;
    let mut entries = Vec::with_capacity(k);
    for _ in 0..k {
        let table_id = r.u32()?;
        let partition_index = r.u32()?;
        let n_items = r.u32()? as usize;
        let n_indices = r.u32()? as usize;
        let lengths = r.u32s(n_items)?;
        let indices = r.u32s(n_indices)?;
        if lengths.iter().map(|&l| l as u64).sum::<u64>() != n_indices as u64 {
            return Err(FrameError::Malformed(format!("table {table_id}: lengths do not sum to the index count")));
        }
        entries.push(LookupEntry { table_id, partition_index, lengths, indices });
    }
    r.finish()?;
    Ok(SparseLookupRequest { net_id, batch_index, entries })
}

pub fn encode_lookup_response(resp: &SparseLookupResponse) -> Bytes {
    let size: usize = resp.entries.iter().map(|e| 16 + 4 * (e.item_lens.len() + e.values.len())).sum();
    let mut b = BytesMut::with_capacity(4 + size);
    b.put_u32_le(resp.entries.len() as u32);
    for e in &resp.entries {
        b.put_u32_le(e.table_id);
        b.put_u32_le(e.partition_index);
        b.put_u32_le(e.item_lens.len() as u32);
        b.put_u32_le(e.values.len() as u32);
        for l in &e.item_lens {
            b.put_u32_le(*l);
        }
        for v in &e.values {
            b.put_f32_le(*v);
        }
    }
    b.freeze()
}

pub fn decode_lookup_response(payload: &[u8]) -> Result<SparseLookupResponse, FrameError> {
    let mut r = Reader::new(payload, "lookup response");
    let k = r.count(16)?;
    let mut entries = Vec::with_capacity(k);
    for _ in 0..k {
        let table_id = r.u32()?;
        let partition_index = r.u32()?;
        let n_items = r.u32()? as usize;
        let n_floats = r.u32()? as usize;
        let item_lens = r.u32s(n_items)?;
        let values = r.f32s(n_floats)?;
        if item_lens.iter().map(|&l| l as u64).sum::<u64>() != n_floats as u64 {
            return Err(FrameError::Malformed(format!("table {table_id}: item widths do not sum to the value count")));
        }
        entries.push(PartialEntry { table_id, partition_index, item_lens, values });
    }
    r.finish()?;
    Ok(SparseLookupResponse { entries })
}

/// Error categories carried in `Error` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    InvalidRequest = 1,
    IndexOutOfRange = 2,
    UnknownPartition = 3,
    ShardUnavailable = 4,
    RpcTimeout = 5,
    RemoteExecution = 6,
    Internal = 7,
    MalformedFrame = 8,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> ErrorCode {
        match v {
            1 => ErrorCode::InvalidRequest,
            2 => ErrorCode::IndexOutOfRange,
            3 => ErrorCode::UnknownPartition,
            4 => ErrorCode::ShardUnavailable,
            5 => ErrorCode::RpcTimeout,
            6 => ErrorCode::RemoteExecution,
            8 => ErrorCode::MalformedFrame,
            _ => ErrorCode::Internal,
        }
    }

    pub fn of(e: &EngineError) -> ErrorCode {
        match e {
            EngineError::InvalidRequest(_) => ErrorCode::InvalidRequest,
            EngineError::IndexOutOfRange { .. } => ErrorCode::IndexOutOfRange,
            EngineError::UnknownPartition { .. } => ErrorCode::UnknownPartition,
            EngineError::ShardUnavailable { .. } => ErrorCode::ShardUnavailable,
            EngineError::RpcTimeout { .. } => ErrorCode::RpcTimeout,
            EngineError::RemoteExecution { .. } => ErrorCode::RemoteExecution,
            EngineError::Model(_) => ErrorCode::Internal,
        }
    }
}

/// Body of an `Error` frame. `shard` names the shard at fault when known,
/// `u32::MAX` otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMessage {
    pub code: ErrorCode,
    pub shard: u32,
    pub message: String,
}

impl ErrorMessage {
    pub const NO_SHARD: u32 = u32::MAX;

    pub fn from_engine(e: &EngineError) -> Self {
        let shard = match e {
            EngineError::UnknownPartition { shard, .. }
            | EngineError::ShardUnavailable { shard, .. }
            | EngineError::RpcTimeout { shard, .. }
            | EngineError::RemoteExecution { shard, .. } => *shard,
            _ => Self::NO_SHARD,
        };
        ErrorMessage { code: ErrorCode::of(e), shard, message: e.to_string() }
    }
}

pub fn encode_error(e: &ErrorMessage) -> Bytes {
    let mut b = BytesMut::with_capacity(10 + e.message.len());
    b.put_u16_le(e.code as u16);
    b.put_u32_le(e.shard);
    b.put_u32_le(e.message.len() as u32);
    b.put_slice(e.message.as_bytes());
    b.freeze()
}

pub fn decode_error(payload: &[u8]) -> Result<ErrorMessage, FrameError> {
    let mut r = Reader::new(payload, "error");
    let code = ErrorCode::from_u16(r.u16()?);
    let shard = r.u32()?;
    let n = r.count(1)?;
    let message = String::from_utf8_lossy(r.take(n)?).into_owned();
    r.finish()?;
    Ok(ErrorMessage { code, shard, message })
}
