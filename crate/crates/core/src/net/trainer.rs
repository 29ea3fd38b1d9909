use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::codec::{AckStatus, Message, WireSample};
use super::transport::{server_handshake, Connection};
use super::NetError;
use crate::error::{Error, Result};
use crate::model::{encode_checkpoint, Example, GruParameters, WindowSample};
use crate::numerics::RealMatrix;

impl WireSample {
    pub fn from_example<E: Example>(e: &E) -> Result<Self> {
        let w = e.window();
        let label = u8::try_from(e.label_index())
            .map_err(|_| Error::invalid("label does not fit a byte"))?;
        Ok(Self {
            label,
            rows: u32::try_from(w.rows()).map_err(|_| Error::invalid("window too long"))?,
            cols: u32::try_from(w.cols()).map_err(|_| Error::invalid("window too wide"))?,
            values: w.as_slice().to_vec(),
        })
    }

    pub fn to_window_sample(&self) -> Result<WindowSample> {
        Ok(WindowSample {
            window: RealMatrix::new(self.rows as usize, self.cols as usize, self.values.clone())?,
            label: self.label as usize,
        })
    }
}

/// TCP accept side of the training node.
pub struct TrainerListener {
    listener: TcpListener,
}

impl TrainerListener {
    pub fn bind<A: ToSocketAddrs>(addr: A) -> std::result::Result<Self, NetError> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
        })
    }

    pub fn local_addr(&self) -> std::result::Result<SocketAddr, NetError> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts one node and runs the handshake.
    pub fn accept(
        &self,
        timeout: Option<Duration>,
    ) -> std::result::Result<(u32, Connection), NetError> {
        let (stream, _) = self.listener.accept()?;
        let mut conn = Connection::from_tcp(stream)?;
        let id = server_handshake(&mut conn, timeout)?;
        Ok((id, conn))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub version: u32,
    pub acked: Vec<u32>,
    pub rejected: Vec<u32>,
    pub unreachable: Vec<u32>,
    pub sends: u32,
}

impl DistributionReport {
    pub fn all_acked(&self) -> bool {
        self.rejected.is_empty() && self.unreachable.is_empty()
    }
}

/// The edge server: holds the authoritative weights and one session per
/// online node.
pub struct TrainingNode {
    sessions: Vec<(u32, Connection)>,
    params: GruParameters,
    version: u32,
    pub ack_timeout: Duration,
    pub retries: u32,
}

impl TrainingNode {
    pub fn new(params: GruParameters, version: u32) -> Self {
        Self {
            sessions: Vec::new(),
            params,
            version,
            ack_timeout: Duration::from_secs(5),
            retries: 2,
        }
    }

    pub fn add_session(&mut self, node_id: u32, conn: Connection) {
        self.sessions.push((node_id, conn));
    }

    pub fn node_ids(&self) -> Vec<u32> {
        self.sessions.iter().map(|s| s.0).collect()
    }

    pub fn params(&self) -> &GruParameters {
        &self.params
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn commit(&mut self, version: u32, params: GruParameters) {
        self.version = version;
        self.params = params;
    }

    fn session(&mut self, node_id: u32) -> std::result::Result<&mut Connection, NetError> {
        self.sessions
            .iter_mut()
            .find(|s| s.0 == node_id)
            .map(|s| &mut s.1)
            .ok_or_else(|| NetError::Unexpected(format!("no session for node {node_id}")))
    }

    pub fn recv_from(
        &mut self,
        node_id: u32,
        timeout: Option<Duration>,
    ) -> std::result::Result<Message, NetError> {
        self.session(node_id)?.recv(timeout)
    }

    pub fn expect_update_request(
        &mut self,
        node_id: u32,
        timeout: Option<Duration>,
    ) -> std::result::Result<f64, NetError> {
        match self.recv_from(node_id, timeout)? {
            Message::UpdateRequest {
                mean_confidence, ..
            } => Ok(mean_confidence),
            other => Err(NetError::Unexpected(format!(
                "{} instead of update-request",
                other.kind()
            ))),
        }
    }

    pub fn expect_batch(
        &mut self,
        node_id: u32,
        timeout: Option<Duration>,
    ) -> std::result::Result<Vec<WireSample>, NetError> {
        match self.recv_from(node_id, timeout)? {
            Message::LabeledBatch { samples } => Ok(samples),
            other => Err(NetError::Unexpected(format!(
                "{} instead of labeled-batch",
                other.kind()
            ))),
        }
    }

    /// Sends `params` as `version` to every node, resending on timeout up to
    /// `retries` times. Does not commit.
    pub fn distribute(
        &mut self,
        version: u32,
        params: &GruParameters,
    ) -> Result<DistributionReport> {
        let package = Message::weight_package(version, encode_checkpoint(params)?);
        let mut report = DistributionReport {
            version,
            ..Default::default()
        };
        let (timeout, retries) = (self.ack_timeout, self.retries);
        for (id, conn) in &mut self.sessions {
            let mut outcome = None;
            'attempts: for _ in 0..=retries {
                report.sends += 1;
                if conn.send(&package).is_err() {
                    break;
                }
                loop {
                    match conn.recv(Some(timeout)) {
                        Ok(Message::Ack {
                            ref_version,
                            status,
                        }) if ref_version == version => {
                            outcome = Some(status);
                            break 'attempts;
                        }
                        // Stale ack from an earlier attempt or cycle.
                        Ok(_) => continue,
                        Err(NetError::Timeout) => continue 'attempts,
                        Err(_) => break 'attempts,
                    }
                }
            }
            match outcome {
                Some(AckStatus::Ok) => report.acked.push(*id),
                Some(AckStatus::Reject) => report.rejected.push(*id),
                None => report.unreachable.push(*id),
            }
        }
        Ok(report)
    }
}
