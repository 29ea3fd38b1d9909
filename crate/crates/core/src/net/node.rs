use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;

use super::codec::{package_checksum, AckStatus, Message};
use super::transport::{Connection, FrameReceiver, FrameSender};
use super::NetError;
use crate::error::Result;
use crate::model::{
    decode_checkpoint, encode_checkpoint, predict_batch, GruParameters, Prediction,
};
use crate::numerics::RealMatrix;

/// An immutable published weight set.
#[derive(Debug, Clone, PartialEq)]
pub struct VersionedWeights {
    pub version: u32,
    pub params: GruParameters,
    /// CRC32 of the encoded checkpoint.
    pub checksum: u32,
}

/// Holder of the weights a node serves. Readers take a snapshot; installs
/// swap the whole snapshot, so no reader ever sees a mix of versions.
#[derive(Debug)]
pub struct WeightSlot {
    current: RwLock<Arc<VersionedWeights>>,
}

impl WeightSlot {
    pub fn new(params: GruParameters, version: u32) -> Result<Self> {
        let checksum = package_checksum(version, &encode_checkpoint(&params)?);
        Ok(Self {
            current: RwLock::new(Arc::new(VersionedWeights {
                version,
                params,
                checksum,
            })),
        })
    }

    pub fn snapshot(&self) -> Arc<VersionedWeights> {
        Arc::clone(&self.current.read().expect("weight lock poisoned"))
    }

    fn install(&self, weights: VersionedWeights) {
        *self.current.write().expect("weight lock poisoned") = Arc::new(weights);
    }
}

/// Inference unit holding one weight slot.
#[derive(Debug)]
pub struct DetectionNode {
    id: u32,
    slot: WeightSlot,
    rejected: AtomicU64,
}

impl DetectionNode {
    pub fn new(id: u32, params: GruParameters) -> Result<Self> {
        Ok(Self {
            id,
            slot: WeightSlot::new(params, 0)?,
            rejected: AtomicU64::new(0),
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn weights(&self) -> Arc<VersionedWeights> {
        self.slot.snapshot()
    }

    pub fn version(&self) -> u32 {
        self.weights().version
    }

    pub fn rejected_packages(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }

    pub fn predict(&self, windows: &[&RealMatrix]) -> Result<Vec<Prediction>> {
        predict_batch(&self.weights().params, windows)
    }

    /// Verifies and installs a weight package. Anything that fails
    /// verification leaves the current weights in place.
    pub fn apply_package(&self, version: u32, checkpoint: &[u8], checksum: u32) -> AckStatus {
        let status = self.verify_and_install(version, checkpoint, checksum);
        if status == AckStatus::Reject {
            self.rejected.fetch_add(1, Ordering::Relaxed);
        }
        status
    }

    fn verify_and_install(&self, version: u32, checkpoint: &[u8], checksum: u32) -> AckStatus {
        if package_checksum(version, checkpoint) != checksum {
            return AckStatus::Reject;
        }
        let cur = self.weights();
        if version == cur.version && checksum == cur.checksum {
            // Retransmission of what is already installed.
            return AckStatus::Ok;
        }
        if version <= cur.version {
            return AckStatus::Reject;
        }
        let Ok(params) = decode_checkpoint(checkpoint) else {
            return AckStatus::Reject;
        };
        if params.config() != cur.params.config()
            || params.hidden_dims() != cur.params.hidden_dims()
        {
            return AckStatus::Reject;
        }
        self.slot.install(VersionedWeights {
            version,
            params,
            checksum,
        });
        AckStatus::Ok
    }

    /// Reply to an incoming message, if it calls for one.
    pub fn handle(&self, msg: &Message) -> Option<Message> {
        match msg {
            Message::WeightPackage {
                version,
                checkpoint,
                checksum,
            } => Some(Message::Ack {
                ref_version: *version,
                status: self.apply_package(*version, checkpoint, *checksum),
            }),
            _ => None,
        }
    }
}

pub type SharedSender = Arc<Mutex<Box<dyn FrameSender>>>;

/// Runs the node's downlink loop until the trainer hangs up. Returns the
/// number of weight packages handled.
pub fn spawn_node_service(
    node: Arc<DetectionNode>,
    mut receiver: Box<dyn FrameReceiver>,
    sender: SharedSender,
) -> JoinHandle<std::result::Result<u64, NetError>> {
    std::thread::spawn(move || {
        let mut handled = 0;
        loop {
            let msg = match receiver.recv(None) {
                Ok(m) => m,
                Err(NetError::Disconnected) => return Ok(handled),
                Err(e) => return Err(e),
            };
            if let Some(reply) = node.handle(&msg) {
                handled += 1;
                sender.lock().expect("uplink lock poisoned").send(&reply)?;
            }
        }
    })
}

/// A node with its session: downlink handled on a service thread, uplink
/// available to the caller.
pub struct NodeHandle {
    pub node: Arc<DetectionNode>,
    uplink: SharedSender,
    service: Option<JoinHandle<std::result::Result<u64, NetError>>>,
}

impl NodeHandle {
    pub fn start(node: Arc<DetectionNode>, conn: Connection) -> Self {
        let uplink: SharedSender = Arc::new(Mutex::new(conn.sender));
        let service = spawn_node_service(Arc::clone(&node), conn.receiver, Arc::clone(&uplink));
        Self {
            node,
            uplink,
            service: Some(service),
        }
    }

    pub fn send(&self, msg: &Message) -> std::result::Result<(), NetError> {
        self.uplink.lock().expect("uplink lock poisoned").send(msg)
    }

    /// Waits for the service thread; the trainer must have disconnected.
    pub fn join(mut self) -> std::result::Result<u64, NetError> {
        match self.service.take() {
            Some(h) => h
                .join()
                .unwrap_or_else(|_| Err(NetError::Unexpected("node service panicked".into()))),
            None => Ok(0),
        }
    }
}
