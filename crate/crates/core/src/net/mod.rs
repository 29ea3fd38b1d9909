//! Framed binary protocol between detection nodes and the training node,
//! with in-memory and TCP transports.

mod codec;
mod node;
mod trainer;
mod transport;

pub use codec::{
    decode, encode, encode_with_version, package_checksum, AckStatus, Decoded, Message, WireSample,
    FRAME_OVERHEAD, HEADER_LEN, MAGIC, MAX_PAYLOAD, PROTOCOL_VERSION,
};
pub use node::{spawn_node_service, DetectionNode, NodeHandle, VersionedWeights, WeightSlot};
pub use trainer::{DistributionReport, TrainerListener, TrainingNode};
pub use transport::{
    client_handshake, memory_pair, server_handshake, tcp_connect, Connection, FrameReceiver,
    FrameSender,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("bad frame magic")]
    BadMagic,

    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u16),

    #[error("unknown message type {0}")]
    UnknownType(u8),

    #[error("payload of {0} bytes exceeds the frame limit")]
    Oversize(usize),

    #[error("payload crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },

    #[error("malformed payload: {0}")]
    Malformed(String),

    #[error("connection refused by peer: {0}")]
    Refused(String),

    #[error("unexpected message: {0}")]
    Unexpected(String),

    #[error("timed out waiting for a frame")]
    Timeout,

    #[error("peer disconnected")]
    Disconnected,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
