//! Little-endian wire layout shared by every payload kind.
//!
//! ```text
//! "PACT" | version u8 | kind u8 | epoch u32 | mask_digest u64 | value_count u64 | payload
//! ```

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PACT";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 1 + 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PayloadKind {
    Full = 0,
    Packed = 1,
    Ternary = 2,
    Fp16 = 3,
    TopK = 4,
}

impl TryFrom<u8> for PayloadKind {
    type Error = Error;

    fn try_from(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Self::Full,
            1 => Self::Packed,
            2 => Self::Ternary,
            3 => Self::Fp16,
            4 => Self::TopK,
            other => {
                return Err(Error::CorruptPayload(format!(
                    "unknown payload kind {other}"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireHeader {
    pub kind: PayloadKind,
    pub epoch: u32,
    pub mask_digest: u64,
    pub value_count: u64,
}

impl WireHeader {
    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.mask_digest.to_le_bytes());
        out.extend_from_slice(&self.value_count.to_le_bytes());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        self.write(&mut out);
        out
    }

    /// Parses a header and returns it with the remaining payload bytes.
    pub fn parse(bytes: &[u8]) -> Result<(Self, &[u8])> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::CorruptPayload(format!(
                "frame of {} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::CorruptPayload("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::CorruptPayload(format!(
                "unsupported version {}",
                bytes[4]
            )));
        }
        let kind = PayloadKind::try_from(bytes[5])?;
        let epoch = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        let mask_digest = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
        let value_count = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
        Ok((
            Self {
                kind,
                epoch,
                mask_digest,
                value_count,
            },
            &bytes[HEADER_LEN..],
        ))
    }

    pub(crate) fn expect_kind(&self, kind: PayloadKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::CorruptPayload(format!(
                "expected {kind:?} payload, got {:?}",
                self.kind
            )))
        }
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn get_f32s(bytes: &[u8], count: usize) -> Result<Vec<f32>> {
    if bytes.len() != count * 4 {
        return Err(Error::CorruptPayload(format!(
            "expected {} value bytes, got {}",
            count * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn count_to_usize(count: u64) -> Result<usize> {
    usize::try_from(count)
        .map_err(|_| Error::CorruptPayload(format!("value count {count} too large")))
}
