//! Binary weight checkpoint.
//!
//! Layout (little endian): `STARW`, u16 version, u8 layer count, u32 input
//! dim, u32 hidden dim per layer, u32 classes, then every tensor as f64 in
//! `GruParameters::tensors` order, then a CRC32 of all preceding bytes.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::params::{GruLayerParams, GruParameters};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"STARW";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(params: &GruParameters) -> Result<Vec<u8>> {
    params.validate()?;
    let mut out = Vec::with_capacity(64 + 8 * params.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(params.layers.len() as u8);
    let dim = |v: usize| -> Result<[u8; 4]> {
        u32::try_from(v)
            .map(u32::to_le_bytes)
            .map_err(|_| Error::Checkpoint(format!("dimension {v} does not fit u32")))
    };
    out.extend_from_slice(&dim(params.input_dim())?);
    for h in params.hidden_dims() {
        out.extend_from_slice(&dim(h)?);
    }
    out.extend_from_slice(&dim(params.num_classes())?);
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let data = self.f64s(
            rows.checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn vector(&mut self, n: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.f64s(n)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<GruParameters> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 {
        return Err(Error::Checkpoint("too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if &body[..5] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "crc mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut c = Cursor {
        bytes: body,
        pos: 5,
    };
    let version = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let layer_count = c.take(1)?[0] as usize;
    if layer_count == 0 {
        return Err(Error::Checkpoint("zero layers".into()));
    }
    let input = c.u32()?;
    let hidden: Vec<usize> = (0..layer_count).map(|_| c.u32()).collect::<Result<_>>()?;
    let classes = c.u32()?;

    let mut layers = Vec::with_capacity(layer_count);
    let mut d = input;
    for &h in &hidden {
        layers.push(GruLayerParams {
            w_z: c.matrix(h, d)?,
            u_z: c.matrix(h, h)?,
            b_z: c.vector(h)?,
            w_r: c.matrix(h, d)?,
            u_r: c.matrix(h, h)?,
            b_r: c.vector(h)?,
            w_h: c.matrix(h, d)?,
            u_h: c.matrix(h, h)?,
            b_h: c.vector(h)?,
        });
        d = h;
    }
    let w_o = c.matrix(classes, d)?;
    let b_o = c.vector(classes)?;
    if c.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            body.len() - c.pos
        )));
    }
    let params = GruParameters { layers, w_o, b_o };
    params
        .validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(params)
}

pub fn save_checkpoint(params: &GruParameters, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<GruParameters> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params() -> GruParameters {
        GruParameters::init(
            &ModelConfig {
                input_dim: 5,
                hidden_dim: 4,
                layers: 3,
                classes: 8,
            },
            21,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let bytes = encode_checkpoint(&p).unwrap();
        let q = decode_checkpoint(&bytes).unwrap();
        let bits = |p: &GruParameters| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
        assert_eq!(encode_checkpoint(&q).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&params()).unwrap();
        assert_eq!(&bytes[..5], b"STARW");
        assert_eq!(u16::from_le_bytes([bytes[5], bytes[6]]), 1);
        assert_eq!(bytes[7], 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), 8 + 4 * 5 + 8 * params().num_params() + 4);
    }

    #[test]
    fn every_single_bit_flip_is_detected() {
        let bytes = encode_checkpoint(&params()).unwrap();
        for i in (0..bytes.len()).step_by(7) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(decode_checkpoint(&bad).is_err(), "flip at {i} accepted");
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode_checkpoint(&params()).unwrap();
        for len in [0, 3, 10, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..len]).is_err());
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.starw");
        save_checkpoint(&params(), &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), params());
    }
}
