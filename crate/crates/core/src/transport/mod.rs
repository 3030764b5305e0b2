//! Wire protocol and the main/sparse shard services.
//!
//! Blocking TCP with one thread per connection. Every message is one
//! [`Frame`]; the frame header carries the trace context so spans recorded
//! on a sparse shard attach under the main shard's RPC op span.

mod client;
mod frame;
pub mod message;
mod server;
mod topology;

pub use client::{MainClient, RankReceiver, RankResponse, RankSender, RemoteDispatch};
pub use frame::{read_frame, write_frame, Frame, FrameError, MsgType, DEFAULT_MAX_FRAME, HEADER_LEN, WIRE_VERSION};
pub use message::{ErrorCode, ErrorMessage};
pub use server::{serve_main, serve_sparse, ServerHandle};
pub use topology::{Topology, TOPOLOGY_MAGIC};

use thiserror::Error;

use crate::engine::EngineError;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("topology: {0}")]
    Topology(String),
    #[error("remote error ({:?}, shard {}): {}", .0.code, .0.shard, .0.message)]
    Remote(ErrorMessage),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
