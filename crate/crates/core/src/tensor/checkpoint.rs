//! "TWCK" named-tensor container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "TWCK"
//! version  u32      1 = f32 payload, 2 = f64 payload
//! count    u32      number of records
//! record*  name_len u32, name UTF-8 bytes,
//!          rank u32, dims u32 * rank,
//!          payload  product(dims) * (4 | 8) bytes
//! ```

use std::io::{Read, Write};

use super::{Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TWCK";

/// Payload width. `F32` is the compact export format; `F64` is lossless and
/// is what resumable training checkpoints use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointPrecision {
    F32,
    F64,
}

impl CheckpointPrecision {
    fn version(self) -> u32 {
        match self {
            CheckpointPrecision::F32 => 1,
            CheckpointPrecision::F64 => 2,
        }
    }
}

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    records: &[(String, Tensor)],
    precision: CheckpointPrecision,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&precision.version().to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match precision {
            CheckpointPrecision::F32 => {
                for &v in t.data() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            CheckpointPrecision::F64 => {
                for &v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    w.write_all(&buf).map_err(io_err)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads every record. Returns the payload precision alongside.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Vec<(String, Tensor)>, CheckpointPrecision)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io_err)?;
    let mut c = Cursor { buf: &bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let precision = match c.u32()? {
        1 => CheckpointPrecision::F32,
        2 => CheckpointPrecision::F64,
        v => return Err(TensorError::Checkpoint(format!("unsupported version {v}"))),
    };
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| TensorError::Checkpoint("record name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match precision {
            CheckpointPrecision::F32 => c
                .take(n * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            CheckpointPrecision::F64 => c
                .take(n * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        };
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(TensorError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok((out, precision))
}
