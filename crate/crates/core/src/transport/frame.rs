//! Length-prefixed frames.
//!
//! ```text
//! offset  size  field (header fields big-endian)
//!      0     4  length: bytes after this field
//!      4     1  version (1)
//!      5     1  msg_type
//!      6    16  trace_id
//!     22     8  parent_span_id
//!     30     8  request_id
//!     38     -  payload (little-endian body, see `message`)
//! ```

use std::io::{self, Read, Write};

use bytes::{Buf, BufMut, Bytes, BytesMut};
use thiserror::Error;

pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 38;
/// Bytes counted by the length field besides the payload.
const FIXED_AFTER_LEN: usize = HEADER_LEN - 4;
pub const DEFAULT_MAX_FRAME: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame of {size} bytes exceeds the {max}-byte limit")]
    FrameTooLarge { size: usize, max: usize },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("unsupported wire version {0}")]
    VersionMismatch(u8),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    RankingReq = 1,
    RankingResp = 2,
    LookupReq = 3,
    LookupResp = 4,
    Error = 5,
}

impl TryFrom<u8> for MsgType {
    type Error = FrameError;
    fn try_from(v: u8) -> Result<Self, FrameError> {
        Ok(match v {
            1 => MsgType::RankingReq,
            2 => MsgType::RankingResp,
            3 => MsgType::LookupReq,
            4 => MsgType::LookupResp,
            5 => MsgType::Error,
            other => return Err(FrameError::Malformed(format!("unknown message type {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub trace_id: u128,
    pub parent_span_id: u64,
    pub request_id: u64,
    pub payload: Bytes,
}

impl Frame {
    pub fn new(msg_type: MsgType, trace_id: u128, parent_span_id: u64, request_id: u64, payload: impl Into<Bytes>) -> Self {
        Frame { msg_type, trace_id, parent_span_id, request_id, payload: payload.into() }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Bytes {
        let mut b = BytesMut::with_capacity(self.encoded_len());
        b.put_u32((FIXED_AFTER_LEN + self.payload.len()) as u32);
        b.put_u8(WIRE_VERSION);
        b.put_u8(self.msg_type as u8);
        b.put_u128(self.trace_id);
        b.put_u64(self.parent_span_id);
        b.put_u64(self.request_id);
        b.put_slice(&self.payload);
        b.freeze()
    }

    /// Decode exactly one frame occupying all of `buf`.
    pub fn decode(buf: &[u8]) -> Result<Frame, FrameError> {
        Self::decode_with_limit(buf, DEFAULT_MAX_FRAME)
    }

    pub fn decode_with_limit(buf: &[u8], max: usize) -> Result<Frame, FrameError> {
        if buf.len() < 4 {
            return Err(FrameError::Malformed(format!("{} bytes is shorter than the length field", buf.len())));
        }
        let len = u32::from_be_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
        check_len(len, max)?;
        if buf.len() - 4 != len {
            return Err(FrameError::Malformed(format!("length field says {len} bytes, buffer holds {}", buf.len() - 4)));
        }
        decode_body(&buf[4..])
    }
}

fn check_len(len: usize, max: usize) -> Result<(), FrameError> {
    if len + 4 > max {
        return Err(FrameError::FrameTooLarge { size: len + 4, max });
    }
    if len < FIXED_AFTER_LEN {
        return Err(FrameError::Malformed(format!("length {len} is shorter than the header")));
    }
    Ok(())
}

fn decode_body(mut b: &[u8]) -> Result<Frame, FrameError> {
    let version = b.get_u8();
    if version != WIRE_VERSION {
        return Err(FrameError::VersionMismatch(version));
    }
    let msg_type = MsgType::try_from(b.get_u8())?;
    let trace_id = b.get_u128();
    let parent_span_id = b.get_u64();
    let request_id = b.get_u64();
    Ok(Frame { msg_type, trace_id, parent_span_id, request_id, payload: Bytes::copy_from_slice(b) })
}

/// Read one frame. `Ok(None)` on a clean end of stream before any byte.
pub fn read_frame(r: &mut impl Read, max: usize) -> Result<Option<Frame>, FrameError> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len_buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(FrameError::Malformed("stream ended inside the length field".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len_buf) as usize;
    check_len(len, max)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FrameError::Malformed("stream ended inside a frame".into()),
        _ => FrameError::Io(e),
    })?;
    decode_body(&body).map(Some)
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<(), FrameError> {
    w.write_all(&frame.encode())?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_written_layout() {
        let f = Frame::new(MsgType::LookupReq, 0x0102, 0x0a0b, 7, vec![0xee, 0xff]);
        let mut want = vec![0, 0, 0, 36, 1, 3];
        want.extend_from_slice(&[0; 14]);
        want.extend_from_slice(&[0x01, 0x02]);
        want.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0x0a, 0x0b]);
        want.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 7]);
        want.extend_from_slice(&[0xee, 0xff]);
        assert_eq!(f.encode().as_ref(), want.as_slice());
    }

    #[test]
    fn truncated_and_bad_version() {
        let bytes = Frame::new(MsgType::Error, 1, 2, 3, vec![1, 2, 3]).encode();
        for cut in 0..bytes.len() {
            assert!(matches!(Frame::decode(&bytes[..cut]), Err(FrameError::Malformed(_))), "cut {cut}");
        }
        let mut bad = bytes.to_vec();
        bad[4] = 9;
        assert!(matches!(Frame::decode(&bad), Err(FrameError::VersionMismatch(9))));
        let mut r = &bytes[..bytes.len() - 1];
        assert!(matches!(read_frame(&mut r, DEFAULT_MAX_FRAME), Err(FrameError::Malformed(_))));
    }

    #[test]
    fn oversize_rejected() {
        let f = Frame::new(MsgType::LookupResp, 0, 0, 0, vec![0u8; 100]);
        assert!(matches!(Frame::decode_with_limit(&f.encode(), 64), Err(FrameError::FrameTooLarge { .. })));
        let mut r = &f.encode()[..];
        assert!(matches!(read_frame(&mut r, 64), Err(FrameError::FrameTooLarge { .. })));
    }

    proptest! {
        #[test]
        fn round_trip(t in 1u8..=5, trace in any::<u128>(), parent in any::<u64>(), req in any::<u64>(),
                      payload in proptest::collection::vec(any::<u8>(), 0..256)) {
            let f = Frame::new(MsgType::try_from(t).unwrap(), trace, parent, req, payload);
            let enc = f.encode();
            prop_assert_eq!(&Frame::decode(&enc).unwrap(), &f);
            let mut r = &enc[..];
            prop_assert_eq!(read_frame(&mut r, DEFAULT_MAX_FRAME).unwrap().unwrap(), f);
        }
    }
}
