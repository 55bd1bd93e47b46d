//! Binary checkpoint format.
//!
//! ```text
//! "RFCK"  u16 version=1
//! table   u32 count, then per entry:
//!         u16 path_len, path (UTF-8), u8 role, u8 rank, rank × u32 dim, f32 payload
//! table   initial-state snapshot, same layout (count 0 when absent)
//! u32     CRC32 of every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::path::Path;

use thiserror::Error;

use super::registry::{Entry, ParamRegistry, Role};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RFCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("{0} unexpected trailing bytes after checkpoint tables")]
    TrailingBytes(usize),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("duplicate entry {path} ({role})")]
    DuplicatePath { path: String, role: Role },
    #[error("unknown role tag {0}")]
    RoleTag(u8),
    #[error("entry path is not valid UTF-8")]
    PathEncoding,
    #[error("invalid tensor shape {0:?}")]
    Shape(Vec<usize>),
    #[error("entry path longer than {} bytes", u16::MAX)]
    PathTooLong,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn write_table(out: &mut Vec<u8>, entries: &[Entry]) -> Result<(), CheckpointError> {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let path = e.path.as_bytes();
        let len = u16::try_from(path.len()).map_err(|_| CheckpointError::PathTooLong)?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(path);
        out.push(e.role.tag());
        out.push(e.tensor.rank() as u8);
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

pub fn encode_checkpoint(registry: &ParamRegistry) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_table(&mut out, registry.entries())?;
    write_table(&mut out, registry.init_snapshot().unwrap_or(&[]))?;
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

struct RawEntry<'a> {
    path: &'a [u8],
    role: u8,
    shape: Vec<usize>,
    payload: &'a [u8],
}

fn read_table<'a>(r: &mut Reader<'a>) -> Result<Vec<RawEntry<'a>>, CheckpointError> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let path = r.take(len)?;
        let role = r.u8()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or(CheckpointError::Truncated)?;
        let payload = r.take(numel)?;
        out.push(RawEntry { path, role, shape, payload });
    }
    Ok(out)
}

fn finish_table(raw: Vec<RawEntry<'_>>) -> Result<Vec<Entry>, CheckpointError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(raw.len());
    for e in raw {
        let path = std::str::from_utf8(e.path).map_err(|_| CheckpointError::PathEncoding)?.to_string();
        let role = Role::from_tag(e.role).ok_or(CheckpointError::RoleTag(e.role))?;
        if !seen.insert((path.clone(), role)) {
            return Err(CheckpointError::DuplicatePath { path, role });
        }
        let data: Vec<f32> = e.payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(&e.shape, data).map_err(|_| CheckpointError::Shape(e.shape.clone()))?;
        out.push(Entry { path, role, tensor });
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamRegistry, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let live = read_table(&mut r)?;
    let snap = read_table(&mut r)?;
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let entries = finish_table(live)?;
    let snapshot = finish_table(snap)?;
    let snapshot = (!snapshot.is_empty()).then_some(snapshot);
    ParamRegistry::from_parts(entries, snapshot).map_err(|e| match e {
        super::RegistryError::Duplicate { path, role } | super::RegistryError::Missing { path, role } => {
            CheckpointError::DuplicatePath { path, role }
        }
    })
}

pub fn save_checkpoint(registry: &ParamRegistry, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(registry)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamRegistry, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}
