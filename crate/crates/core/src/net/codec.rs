//! Frame layout (little endian): `MVST`, u16 version, u8 type, u32 payload
//! length, payload, CRC32 of the payload.

use serde::{Deserialize, Serialize};

use super::NetError;

pub const MAGIC: &[u8; 4] = b"MVST";
pub const PROTOCOL_VERSION: u16 = 1;
pub const MAX_PAYLOAD: usize = 64 << 20;
pub const HEADER_LEN: usize = 11;
/// Header plus trailing CRC.
pub const FRAME_OVERHEAD: usize = HEADER_LEN + 4;

const T_UPDATE: u8 = 1;
const T_BATCH: u8 = 2;
const T_WEIGHTS: u8 = 3;
const T_ACK: u8 = 4;
const T_HELLO: u8 = 5;
const T_REFUSED: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AckStatus {
    Ok = 0,
    Reject = 1,
}

/// One labelled feature window, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WireSample {
    pub label: u8,
    pub rows: u32,
    pub cols: u32,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    UpdateRequest {
        node_id: u32,
        mean_confidence: f64,
    },
    LabeledBatch {
        samples: Vec<WireSample>,
    },
    WeightPackage {
        version: u32,
        checkpoint: Vec<u8>,
        checksum: u32,
    },
    Ack {
        ref_version: u32,
        status: AckStatus,
    },
    Hello {
        node_id: u32,
    },
    Refused {
        reason: String,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::UpdateRequest { .. } => "update-request",
            Message::LabeledBatch { .. } => "labeled-batch",
            Message::WeightPackage { .. } => "weight-package",
            Message::Ack { .. } => "ack",
            Message::Hello { .. } => "hello",
            Message::Refused { .. } => "refused",
        }
    }

    /// Builds a package whose checksum covers `version` and `checkpoint`.
    pub fn weight_package(version: u32, checkpoint: Vec<u8>) -> Self {
        Message::WeightPackage {
            version,
            checksum: package_checksum(version, &checkpoint),
            checkpoint,
        }
    }
}

/// CRC-32 over the little-endian version followed by the checkpoint body.
/// The checkpoint's own trailing CRC is left out: CRC is affine, so hashing
/// data together with its CRC yields the same value for every checkpoint of a
/// given length. The checkpoint decoder verifies the trailer itself.
pub fn package_checksum(version: u32, checkpoint: &[u8]) -> u32 {
    let body = checkpoint
        .len()
        .checked_sub(4)
        .map_or(checkpoint, |n| &checkpoint[..n]);
    let mut h = crc32fast::Hasher::new();
    h.update(&version.to_le_bytes());
    h.update(body);
    h.finalize()
}

fn len_u32(n: usize, what: &str) -> Result<u32, NetError> {
    u32::try_from(n)
        .map_err(|_| NetError::Oversize(n))
        .and_then(|v| {
            if n > MAX_PAYLOAD {
                Err(NetError::Malformed(format!(
                    "{what} of {n} entries too large"
                )))
            } else {
                Ok(v)
            }
        })
}

fn payload(msg: &Message) -> Result<(u8, Vec<u8>), NetError> {
    let mut p = Vec::new();
    let ty = match msg {
        Message::UpdateRequest {
            node_id,
            mean_confidence,
        } => {
            p.extend_from_slice(&node_id.to_le_bytes());
            p.extend_from_slice(&mean_confidence.to_le_bytes());
            T_UPDATE
        }
        Message::LabeledBatch { samples } => {
            p.extend_from_slice(&len_u32(samples.len(), "batch")?.to_le_bytes());
            for s in samples {
                if s.values.len() as u64 != s.rows as u64 * s.cols as u64 {
                    return Err(NetError::Malformed(format!(
                        "sample of {}x{} carries {} values",
                        s.rows,
                        s.cols,
                        s.values.len()
                    )));
                }
                if p.len() + 9 + 8 * s.values.len() > MAX_PAYLOAD {
                    return Err(NetError::Oversize(p.len() + 9 + 8 * s.values.len()));
                }
                p.push(s.label);
                p.extend_from_slice(&s.rows.to_le_bytes());
                p.extend_from_slice(&s.cols.to_le_bytes());
                for v in &s.values {
                    p.extend_from_slice(&v.to_le_bytes());
                }
            }
            T_BATCH
        }
        Message::WeightPackage {
            version,
            checkpoint,
            checksum,
        } => {
            p.extend_from_slice(&version.to_le_bytes());
            p.extend_from_slice(&len_u32(checkpoint.len(), "checkpoint")?.to_le_bytes());
            p.extend_from_slice(checkpoint);
            p.extend_from_slice(&checksum.to_le_bytes());
            T_WEIGHTS
        }
        Message::Ack {
            ref_version,
            status,
        } => {
            p.extend_from_slice(&ref_version.to_le_bytes());
            p.push(*status as u8);
            T_ACK
        }
        Message::Hello { node_id } => {
            p.extend_from_slice(&node_id.to_le_bytes());
            T_HELLO
        }
        Message::Refused { reason } => {
            let bytes = reason.as_bytes();
            let n = u16::try_from(bytes.len())
                .map_err(|_| NetError::Malformed("refusal reason too long".into()))?;
            p.extend_from_slice(&n.to_le_bytes());
            p.extend_from_slice(bytes);
            T_REFUSED
        }
    };
    if p.len() > MAX_PAYLOAD {
        return Err(NetError::Oversize(p.len()));
    }
    Ok((ty, p))
}

/// Encodes `msg` under an arbitrary header version. Only useful for
/// exercising version negotiation.
pub fn encode_with_version(msg: &Message, version: u16) -> Result<Vec<u8>, NetError> {
    let (ty, p) = payload(msg)?;
    let mut out = Vec::with_capacity(FRAME_OVERHEAD + p.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.push(ty);
    out.extend_from_slice(&(p.len() as u32).to_le_bytes());
    out.extend_from_slice(&p);
    out.extend_from_slice(&crc32fast::hash(&p).to_le_bytes());
    Ok(out)
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, NetError> {
    encode_with_version(msg, PROTOCOL_VERSION)
}

/// Outcome of decoding the front of a byte buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    /// A full frame; `consumed` bytes belong to it.
    Frame { message: Message, consumed: usize },
    /// Valid so far but more bytes are needed.
    Incomplete { needed: usize },
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.b.len() - self.pos < n {
            return Err(NetError::Malformed(format!(
                "payload truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NetError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, NetError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn finish(self) -> Result<(), NetError> {
        if self.pos != self.b.len() {
            return Err(NetError::Malformed(format!(
                "{} trailing payload bytes",
                self.b.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn parse(ty: u8, p: &[u8]) -> Result<Message, NetError> {
    let mut r = Reader { b: p, pos: 0 };
    let msg = match ty {
        T_UPDATE => Message::UpdateRequest {
            node_id: r.u32()?,
            mean_confidence: r.f64()?,
        },
        T_BATCH => {
            let count = r.u32()? as usize;
            // Each sample needs at least 9 bytes; reject absurd counts early.
            if count > p.len() / 9 {
                return Err(NetError::Malformed(format!("batch claims {count} samples")));
            }
            let mut samples = Vec::with_capacity(count);
            for _ in 0..count {
                let label = r.u8()?;
                let rows = r.u32()?;
                let cols = r.u32()?;
                let n = rows as u64 * cols as u64;
                if n * 8 > (p.len() - r.pos) as u64 {
                    return Err(NetError::Malformed(format!(
                        "sample of {rows}x{cols} exceeds payload"
                    )));
                }
                let values = (0..n).map(|_| r.f64()).collect::<Result<_, _>>()?;
                samples.push(WireSample {
                    label,
                    rows,
                    cols,
                    values,
                });
            }
            Message::LabeledBatch { samples }
        }
        T_WEIGHTS => {
            let version = r.u32()?;
            let n = r.u32()? as usize;
            let checkpoint = r.take(n)?.to_vec();
            Message::WeightPackage {
                version,
                checkpoint,
                checksum: r.u32()?,
            }
        }
        T_ACK => {
            let ref_version = r.u32()?;
            let status = match r.u8()? {
                0 => AckStatus::Ok,
                1 => AckStatus::Reject,
                s => return Err(NetError::Malformed(format!("ack status {s}"))),
            };
            Message::Ack {
                ref_version,
                status,
            }
        }
        T_HELLO => Message::Hello { node_id: r.u32()? },
        T_REFUSED => {
            let n = r.u16()? as usize;
            let reason = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| NetError::Malformed("refusal reason is not utf-8".into()))?;
            Message::Refused { reason }
        }
        other => return Err(NetError::UnknownType(other)),
    };
    r.finish()?;
    Ok(msg)
}

/// Decodes the first frame in `bytes`. A valid prefix yields
/// [`Decoded::Incomplete`] rather than an error.
pub fn decode(bytes: &[u8]) -> Result<Decoded, NetError> {
    let m = bytes.len().min(MAGIC.len());
    if bytes[..m] != MAGIC[..m] {
        return Err(NetError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Ok(Decoded::Incomplete {
            needed: HEADER_LEN - bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PROTOCOL_VERSION {
        return Err(NetError::UnsupportedVersion(version));
    }
    let ty = bytes[6];
    if !(T_UPDATE..=T_REFUSED).contains(&ty) {
        return Err(NetError::UnknownType(ty));
    }
    let len = u32::from_le_bytes(bytes[7..11].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(NetError::Oversize(len));
    }
    let total = FRAME_OVERHEAD + len;
    if bytes.len() < total {
        return Ok(Decoded::Incomplete {
            needed: total - bytes.len(),
        });
    }
    let p = &bytes[HEADER_LEN..HEADER_LEN + len];
    let stored = u32::from_le_bytes(bytes[HEADER_LEN + len..total].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(p);
    if stored != computed {
        return Err(NetError::Crc { stored, computed });
    }
    Ok(Decoded::Frame {
        message: parse(ty, p)?,
        consumed: total,
    })
}


#[cfg(test)]
mod package_tests {
    use super::*;

    #[test]
    fn package_checksum_distinguishes_checkpoints() {
        let a = b"body-a".to_vec();
        let mut a_full = a.clone();
        a_full.extend_from_slice(&crc32fast::hash(&a).to_le_bytes());
        let b = b"body-b".to_vec();
        let mut b_full = b.clone();
        b_full.extend_from_slice(&crc32fast::hash(&b).to_le_bytes());
        assert_eq!(crc32fast::hash(&a_full), crc32fast::hash(&b_full));
        assert_ne!(package_checksum(1, &a_full), package_checksum(1, &b_full));
        assert_ne!(package_checksum(1, &a_full), package_checksum(2, &a_full));
    }
}
