//! Binary stream dump: little-endian header
//! `{ "CSIS", version u16, n_tx u16, n_rx u16, n_sub u16, rate_hz f64 }`
//! followed by records `{ timestamp_ns u64, label u8, n_tx*n_rx*n_sub x (re f64, im f64) }`.

use std::io::{self, Read, Write};

use num_complex::Complex64;

use super::{ActivityClass, CsiFrame, CsiShape, LabeledFrame};
use crate::error::{Error, Result};

pub const STREAM_MAGIC: [u8; 4] = *b"CSIS";
pub const STREAM_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StreamDump {
    pub shape: CsiShape,
    pub rate_hz: f64,
    pub frames: Vec<LabeledFrame>,
}

pub fn write_stream<W: Write>(
    mut w: W,
    shape: CsiShape,
    rate_hz: f64,
    frames: &[LabeledFrame],
) -> Result<()> {
    shape.validate()?;
    w.write_all(&STREAM_MAGIC)?;
    w.write_all(&STREAM_VERSION.to_le_bytes())?;
    for dim in [shape.n_tx, shape.n_rx, shape.n_sub] {
        w.write_all(&(dim as u16).to_le_bytes())?;
    }
    w.write_all(&rate_hz.to_le_bytes())?;
    let mut buf = Vec::with_capacity(9 + 16 * shape.len());
    for lf in frames {
        if lf.frame.shape != shape {
            return Err(Error::shape(format!(
                "frame shape {:?} differs from stream shape {shape:?}",
                lf.frame.shape
            )));
        }
        buf.clear();
        buf.extend_from_slice(&lf.frame.timestamp_ns.to_le_bytes());
        buf.push(lf.label.index() as u8);
        for c in &lf.frame.values {
            buf.extend_from_slice(&c.re.to_le_bytes());
            buf.extend_from_slice(&c.im.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::StreamFormat("truncated record".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

pub fn read_stream<R: Read>(mut r: R) -> Result<StreamDump> {
    let mut header = [0u8; 20];
    r.read_exact(&mut header)
        .map_err(|_| Error::StreamFormat("truncated header".into()))?;
    if header[..4] != STREAM_MAGIC {
        return Err(Error::StreamFormat("bad magic".into()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([header[i], header[i + 1]]);
    let version = u16_at(4);
    if version != STREAM_VERSION {
        return Err(Error::StreamFormat(format!(
            "unsupported version {version}"
        )));
    }
    let shape = CsiShape::new(u16_at(6) as usize, u16_at(8) as usize, u16_at(10) as usize)?;
    let rate_hz = f64::from_le_bytes(header[12..20].try_into().expect("8 bytes"));
    let mut frames = Vec::new();
    let mut record = vec![0u8; 9 + 16 * shape.len()];
    while read_exact_or_eof(&mut r, &mut record)? {
        let timestamp_ns = u64::from_le_bytes(record[..8].try_into().expect("8 bytes"));
        let label = ActivityClass::try_from(record[8])
            .map_err(|_| Error::StreamFormat(format!("bad label byte {}", record[8])))?;
        let values = record[9..]
            .chunks_exact(16)
            .map(|c| {
                Complex64::new(
                    f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                    f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
                )
            })
            .collect();
        frames.push(LabeledFrame {
            frame: CsiFrame {
                timestamp_ns,
                shape,
                values,
            },
            label,
        });
    }
    Ok(StreamDump {
        shape,
        rate_hz,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{balanced_schedule, generate_stream, ChannelProfile};

    #[test]
    fn round_trip_is_bit_exact() {
        let shape = CsiShape::new(1, 2, 16).unwrap();
        let frames = generate_stream(
            &balanced_schedule(0.2, 1, 1),
            &ChannelProfile::reference(16),
            shape,
            100.0,
            3,
        )
        .unwrap();
        let mut bytes = Vec::new();
        write_stream(&mut bytes, shape, 100.0, &frames).unwrap();
        assert_eq!(bytes.len(), 20 + frames.len() * (9 + 16 * 32));
        let dump = read_stream(&bytes[..]).unwrap();
        assert_eq!(dump.frames, frames);
        assert_eq!(dump.rate_hz.to_bits(), 100f64.to_bits());
        let mut again = Vec::new();
        write_stream(&mut again, dump.shape, dump.rate_hz, &dump.frames).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn header_layout() {
        let shape = CsiShape::new(1, 1, 4).unwrap();
        let mut bytes = Vec::new();
        write_stream(&mut bytes, shape, 100.0, &[]).unwrap();
        assert_eq!(&bytes[..4], b"CSIS");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..12], &[1, 0, 1, 0, 4, 0]);
        assert_eq!(&bytes[12..20], &100f64.to_le_bytes());
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(read_stream(&b"XXXX"[..]).is_err());
        let shape = CsiShape::new(1, 1, 4).unwrap();
        let mut bytes = Vec::new();
        write_stream(&mut bytes, shape, 100.0, &[]).unwrap();
        bytes[0] = b'X';
        assert!(read_stream(&bytes[..]).is_err());
    }
}
