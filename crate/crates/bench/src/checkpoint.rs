//! Binary parameter checkpoints.
//!
//! Layout (little endian): magic `FLPV`, format version `u32`, segment count
//! `u32`, then per segment the name length `u32`, UTF-8 name, rank `u32` and
//! one `u64` per dimension; finally the value count `u64` and the values as
//! `f64`.

use std::path::Path;

use fedloc_core::nn::{NnError, ParamVector};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FLPV";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub fn encode(params: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let segments = params.layout().segments();
    out.extend_from_slice(&(segments.len() as u32).to_le_bytes());
    for s in segments {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
        for &d in &s.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamVector, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let n_segments = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(n_segments.min(1024));
    for _ in 0..n_segments {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Format("segment name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        shapes.push((name, shape));
    }
    let n = r.u64()? as usize;
    let expected: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if n != expected {
        return Err(CheckpointError::Format(format!("{n} values for a layout of {expected}")));
    }
    let bytes = r.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Format("size overflow".into()))?)?;
    if r.pos != buf.len() {
        return Err(CheckpointError::Format("trailing bytes".into()));
    }
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let segments = shapes
        .into_iter()
        .map(|(name, shape)| {
            let len = shape.iter().product();
            let vals: Vec<f64> = values.by_ref().take(len).collect();
            (name, shape, vals)
        })
        .collect();
    Ok(ParamVector::from_segments(segments)?)
}

pub fn save(path: &Path, params: &ParamVector) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(params)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<ParamVector, CheckpointError> {
    let buf = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&buf)
}
