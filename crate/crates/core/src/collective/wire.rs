//! Length-prefixed frames exchanged between ranks.
//!
//! ```text
//! +------+-------------------+-----------------------+-------------------------------+
//! | kind | value count (u32) | values (f64 LE) * cnt | [index count (u32) | u32 LE..] |
//! +------+-------------------+-----------------------+-------------------------------+
//! ```
//!
//! All integers are little-endian. The trailing index section is present only
//! for kinds that carry indices ([`WireKind::Indexed`] and
//! [`WireKind::Control`]).

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Upper bound on either count field, to reject garbage headers before
/// allocating.
pub const MAX_ENTRIES: u32 = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum WireKind {
    /// Dense vector of values.
    Dense = 1,
    /// Values followed by a row or coordinate index list.
    Indexed = 2,
    /// A single seed, carried as the bit pattern of one value.
    Seed = 3,
    /// Connection setup; integers travel in the index list.
    Control = 4,
}

impl WireKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(WireKind::Dense),
            2 => Ok(WireKind::Indexed),
            3 => Ok(WireKind::Seed),
            4 => Ok(WireKind::Control),
            other => Err(Error::Protocol(format!("unknown frame kind {other}"))),
        }
    }

    fn has_indices(self) -> bool {
        matches!(self, WireKind::Indexed | WireKind::Control)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub kind: WireKind,
    pub values: Vec<f64>,
    pub indices: Vec<u32>,
}

impl WireMessage {
    pub fn dense(values: Vec<f64>) -> Self {
        Self {
            kind: WireKind::Dense,
            values,
            indices: Vec::new(),
        }
    }

    pub fn indexed(values: Vec<f64>, indices: Vec<u32>) -> Self {
        Self {
            kind: WireKind::Indexed,
            values,
            indices,
        }
    }

    pub fn seed(seed: u64) -> Self {
        Self {
            kind: WireKind::Seed,
            values: vec![f64::from_bits(seed)],
            indices: Vec::new(),
        }
    }

    pub fn control(words: Vec<u32>) -> Self {
        Self {
            kind: WireKind::Control,
            values: Vec::new(),
            indices: words,
        }
    }

    pub fn seed_value(&self) -> Result<u64> {
        match (self.kind, self.values.as_slice()) {
            (WireKind::Seed, [v]) => Ok(v.to_bits()),
            _ => Err(Error::Protocol("expected a seed frame".into())),
        }
    }

    pub fn encoded_len(&self) -> usize {
        let mut len = 1 + 4 + 8 * self.values.len();
        if self.kind.has_indices() {
            len += 4 + 4 * self.indices.len();
        }
        len
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if !self.kind.has_indices() && !self.indices.is_empty() {
            return Err(Error::Protocol(format!(
                "{:?} frames cannot carry indices",
                self.kind
            )));
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.kind as u8);
        out.extend_from_slice(&count_field(self.values.len())?.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if self.kind.has_indices() {
            out.extend_from_slice(&count_field(self.indices.len())?.to_le_bytes());
            for i in &self.indices {
                out.extend_from_slice(&i.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.encode()?)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let kind = WireKind::from_byte(kind[0])?;
        let count = read_count(r)?;
        let mut buf = vec![0u8; count * 8];
        r.read_exact(&mut buf)?;
        let values = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let indices = if kind.has_indices() {
            let count = read_count(r)?;
            let mut buf = vec![0u8; count * 4];
            r.read_exact(&mut buf)?;
            buf.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            kind,
            values,
            indices,
        })
    }

    pub fn decode(mut bytes: &[u8]) -> Result<Self> {
        let msg = Self::read_from(&mut bytes).map_err(|e| match e {
            Error::Io(io) => Error::Protocol(format!("truncated frame: {io}")),
            other => other,
        })?;
        if !bytes.is_empty() {
            return Err(Error::Protocol(format!(
                "{} trailing bytes after frame",
                bytes.len()
            )));
        }
        Ok(msg)
    }
}

fn count_field(len: usize) -> Result<u32> {
    u32::try_from(len)
        .ok()
        .filter(|&c| c <= MAX_ENTRIES)
        .ok_or_else(|| Error::Protocol(format!("frame section of {len} entries is too large")))
}

fn read_count<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    let count = u32::from_le_bytes(b);
    if count > MAX_ENTRIES {
        return Err(Error::Protocol(format!("declared count {count} exceeds limit")));
    }
    Ok(count as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dense_frame_layout_is_bit_exact() {
        let bytes = WireMessage::dense(vec![1.0, -2.5]).encode().unwrap();
        let mut expected = vec![1u8, 2, 0, 0, 0];
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn indexed_frame_layout_is_bit_exact() {
        let bytes = WireMessage::indexed(vec![0.5], vec![3, 258])
            .encode()
            .unwrap();
        let mut expected = vec![2u8, 1, 0, 0, 0];
        expected.extend_from_slice(&0.5f64.to_le_bytes());
        expected.extend_from_slice(&[2, 0, 0, 0, 3, 0, 0, 0, 2, 1, 0, 0]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn seed_survives_bit_reinterpretation() {
        // Seeds whose bit patterns are NaNs must still round-trip.
        for seed in [0u64, 99, u64::MAX, 0x7ff8_0000_0000_0001] {
            let bytes = WireMessage::seed(seed).encode().unwrap();
            assert_eq!(WireMessage::decode(&bytes).unwrap().seed_value().unwrap(), seed);
        }
    }

    #[test]
    fn rejects_malformed_frames() {
        assert!(matches!(WireMessage::decode(&[9, 0, 0, 0, 0]), Err(Error::Protocol(_))));
        // Declared two values, supplied one.
        let mut short = vec![1u8, 2, 0, 0, 0];
        short.extend_from_slice(&1.0f64.to_le_bytes());
        assert!(matches!(WireMessage::decode(&short), Err(Error::Protocol(_))));
        let mut long = WireMessage::dense(vec![1.0]).encode().unwrap();
        long.push(0);
        assert!(WireMessage::decode(&long).is_err());
        assert!(WireMessage::decode(&[1, 0xff, 0xff, 0xff, 0xff]).is_err());
        let bad = WireMessage {
            kind: WireKind::Dense,
            values: vec![],
            indices: vec![1],
        };
        assert!(bad.encode().is_err());
    }

    proptest! {
        #[test]
        fn frames_round_trip(
            values in prop::collection::vec(any::<f64>(), 0..32),
            indices in prop::collection::vec(any::<u32>(), 0..32),
        ) {
            let msg = WireMessage::indexed(values, indices);
            let bytes = msg.encode().unwrap();
            prop_assert_eq!(bytes.len(), msg.encoded_len());
            let back = WireMessage::decode(&bytes).unwrap();
            let bits = |m: &WireMessage| m.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&msg));
            prop_assert_eq!(back.indices, msg.indices);
        }
    }
}
