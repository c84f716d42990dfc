//! Little-endian parameter checkpoint.
//!
//! ```text
//! magic   4 bytes  "MSWT"
//! version u32
//! records until end of file:
//!   name_len u32, name (UTF-8), rank u32, extents u32 * rank, data f64 * prod(extents)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"MSWT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint: magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated inside record {0}")]
    Truncated(usize),
    #[error("checkpoint record {0} is malformed: {1}")]
    Malformed(usize, String),
    #[error("duplicate record {0:?}")]
    Duplicate(String),
}

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.records.push((name.into(), t));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 {
            let mut m = [0u8; 4];
            m[..bytes.len().min(4)].copy_from_slice(&bytes[..bytes.len().min(4)]);
            return Err(if &m == MAGIC {
                CheckpointError::Truncated(0)
            } else {
                CheckpointError::BadMagic(m)
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut cur = Cursor { bytes, pos: 8 };
        let mut ck = Checkpoint::default();
        while cur.pos < bytes.len() {
            let rec = ck.records.len();
            let name_len = cur.u32(rec)? as usize;
            let name = std::str::from_utf8(cur.take(name_len, rec)?)
                .map_err(|e| CheckpointError::Malformed(rec, e.to_string()))?
                .to_string();
            let rank = cur.u32(rec)? as usize;
            if rank == 0 || rank > 8 {
                return Err(CheckpointError::Malformed(rec, format!("rank {rank}")));
            }
            let shape = (0..rank).map(|_| cur.u32(rec).map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let numel = numel.ok_or_else(|| CheckpointError::Malformed(rec, "extent overflow".into()))?;
            let raw = cur.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated(rec))?, rec)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if ck.get(&name).is_some() {
                return Err(CheckpointError::Duplicate(name));
            }
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(rec, e.to_string()))?;
            ck.records.push((name, t));
        }
        Ok(ck)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, rec: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(rec))?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated(rec));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, rec: usize) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, rec)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_documented_little_endian() {
        let mut ck = Checkpoint::default();
        ck.push("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"MSWT");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
        assert_eq!(b[12], b'w');
        assert_eq!(&b[13..17], &[1, 0, 0, 0]);
        assert_eq!(&b[17..21], &[2, 0, 0, 0]);
        assert_eq!(&b[21..29], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 37);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(Checkpoint::from_bytes(b"XXXX\x01\0\0\0"), Err(CheckpointError::BadMagic(_))));
        let mut ck = Checkpoint::default();
        ck.push("w", Tensor::zeros(&[3, 2]));
        let b = ck.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 3]), Err(CheckpointError::Truncated(0))));
        let mut v = b.clone();
        v[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CheckpointError::Version(9))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>(), 1..40), name in "[a-z./_0-9]{1,16}") {
            let n = values.len();
            let mut ck = Checkpoint::default();
            ck.push(name, Tensor::new(vec![n], values).unwrap());
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), ck.to_bytes());
        }
    }
}
