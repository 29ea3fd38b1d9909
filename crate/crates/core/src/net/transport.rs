use std::io::{ErrorKind, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use super::codec::{decode, encode, AckStatus, Decoded, Message, PROTOCOL_VERSION};
use super::NetError;

/// Largest chunk the in-memory pipe hands over at once, so that frames
/// arrive split just as they can over a socket.
const MEMORY_CHUNK: usize = 16 * 1024;

pub trait FrameSender: Send {
    fn send(&mut self, msg: &Message) -> Result<(), NetError>;
}

pub trait FrameReceiver: Send {
    /// Next complete message; `None` waits forever.
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Message, NetError>;
}

#[derive(Default)]
struct FrameBuffer {
    buf: Vec<u8>,
}

impl FrameBuffer {
    fn next(&mut self) -> Result<Option<Message>, NetError> {
        match decode(&self.buf)? {
            Decoded::Frame { message, consumed } => {
                self.buf.drain(..consumed);
                Ok(Some(message))
            }
            Decoded::Incomplete { .. } => Ok(None),
        }
    }
}

fn remaining(deadline: Option<Instant>) -> Result<Option<Duration>, NetError> {
    match deadline {
        None => Ok(None),
        Some(d) => {
            let now = Instant::now();
            if now >= d {
                Err(NetError::Timeout)
            } else {
                Ok(Some(d - now))
            }
        }
    }
}

struct MemorySender {
    tx: Sender<Vec<u8>>,
}

impl FrameSender for MemorySender {
    fn send(&mut self, msg: &Message) -> Result<(), NetError> {
        let bytes = encode(msg)?;
        for chunk in bytes.chunks(MEMORY_CHUNK) {
            self.tx
                .send(chunk.to_vec())
                .map_err(|_| NetError::Disconnected)?;
        }
        Ok(())
    }
}

struct MemoryReceiver {
    rx: Receiver<Vec<u8>>,
    frames: FrameBuffer,
}

impl FrameReceiver for MemoryReceiver {
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Message, NetError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            if let Some(m) = self.frames.next()? {
                return Ok(m);
            }
            let chunk = match remaining(deadline)? {
                None => self.rx.recv().map_err(|_| NetError::Disconnected)?,
                Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                    RecvTimeoutError::Timeout => NetError::Timeout,
                    RecvTimeoutError::Disconnected => NetError::Disconnected,
                })?,
            };
            self.frames.buf.extend_from_slice(&chunk);
        }
    }
}

struct TcpSender {
    stream: TcpStream,
}

impl FrameSender for TcpSender {
    fn send(&mut self, msg: &Message) -> Result<(), NetError> {
        let bytes = encode(msg)?;
        self.stream.write_all(&bytes).map_err(|e| match e.kind() {
            ErrorKind::BrokenPipe | ErrorKind::ConnectionReset => NetError::Disconnected,
            _ => NetError::Io(e),
        })
    }
}

struct TcpReceiver {
    stream: TcpStream,
    frames: FrameBuffer,
    scratch: Vec<u8>,
}

impl FrameReceiver for TcpReceiver {
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Message, NetError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            if let Some(m) = self.frames.next()? {
                return Ok(m);
            }
            self.stream.set_read_timeout(remaining(deadline)?)?;
            match self.stream.read(&mut self.scratch) {
                Ok(0) => return Err(NetError::Disconnected),
                Ok(n) => self.frames.buf.extend_from_slice(&self.scratch[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Err(NetError::Timeout)
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) if e.kind() == ErrorKind::ConnectionReset => {
                    return Err(NetError::Disconnected)
                }
                Err(e) => return Err(NetError::Io(e)),
            }
        }
    }
}

/// Both directions of one session.
pub struct Connection {
    pub sender: Box<dyn FrameSender>,
    pub receiver: Box<dyn FrameReceiver>,
}

impl Connection {
    pub fn send(&mut self, msg: &Message) -> Result<(), NetError> {
        self.sender.send(msg)
    }

    pub fn recv(&mut self, timeout: Option<Duration>) -> Result<Message, NetError> {
        self.receiver.recv(timeout)
    }

    pub fn from_tcp(stream: TcpStream) -> Result<Self, NetError> {
        stream.set_nodelay(true)?;
        let read = stream.try_clone()?;
        Ok(Self {
            sender: Box::new(TcpSender { stream }),
            receiver: Box::new(TcpReceiver {
                stream: read,
                frames: FrameBuffer::default(),
                scratch: vec![0; 64 * 1024],
            }),
        })
    }
}

/// Two connected in-process endpoints.
pub fn memory_pair() -> (Connection, Connection) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    let end = |tx, rx| Connection {
        sender: Box::new(MemorySender { tx }),
        receiver: Box::new(MemoryReceiver {
            rx,
            frames: FrameBuffer::default(),
        }),
    };
    (end(a_tx, a_rx), end(b_tx, b_rx))
}

pub fn tcp_connect<A: ToSocketAddrs>(addr: A) -> Result<Connection, NetError> {
    Connection::from_tcp(TcpStream::connect(addr)?)
}

/// Node side: announce `node_id` and wait for acceptance.
pub fn client_handshake(
    conn: &mut Connection,
    node_id: u32,
    timeout: Option<Duration>,
) -> Result<(), NetError> {
    conn.send(&Message::Hello { node_id })?;
    match conn.recv(timeout)? {
        Message::Ack {
            status: AckStatus::Ok,
            ..
        } => Ok(()),
        Message::Refused { reason } => Err(NetError::Refused(reason)),
        other => Err(NetError::Unexpected(format!(
            "{} during handshake",
            other.kind()
        ))),
    }
}

/// Trainer side: read the peer's hello. A peer speaking another protocol
/// version is sent a refusal with the reason.
pub fn server_handshake(conn: &mut Connection, timeout: Option<Duration>) -> Result<u32, NetError> {
    match conn.recv(timeout) {
        Ok(Message::Hello { node_id }) => {
            conn.send(&Message::Ack {
                ref_version: 0,
                status: AckStatus::Ok,
            })?;
            Ok(node_id)
        }
        Ok(other) => {
            let reason = format!("expected hello, got {}", other.kind());
            let _ = conn.send(&Message::Refused {
                reason: reason.clone(),
            });
            Err(NetError::Unexpected(reason))
        }
        Err(NetError::UnsupportedVersion(v)) => {
            let reason = format!(
                "protocol version {v} not supported, this trainer speaks {PROTOCOL_VERSION}"
            );
            let _ = conn.send(&Message::Refused {
                reason: reason.clone(),
            });
            Err(NetError::Refused(reason))
        }
        Err(e) => Err(e),
    }
}
