//! Dataset file format.
//!
//! ```text
//! "RFDS"  u16 version=1
//! u16 tag_len, domain tag (UTF-8), u8 split (0 base, 1 novel)
//! u32 N, u16 C, u16 H, u16 W
//! u16 class count, then per class: u16 name_len, name (UTF-8)
//! N × u32 label
//! N·C·H·W u8 pixels
//! u32 CRC32 of every preceding byte
//! ```

use std::path::Path;

use super::{DataError, Dataset, Split};

pub const MAGIC: &[u8; 4] = b"RFDS";
pub const VERSION: u16 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), DataError> {
    let len = u16::try_from(s.len()).map_err(|_| DataError::Malformed(format!("string too long: {s:.20}…")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn dim(v: usize, what: &str) -> Result<u16, DataError> {
    u16::try_from(v).map_err(|_| DataError::Malformed(format!("{what} {v} exceeds u16")))
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>, DataError> {
    if ds.images.len() != ds.len() * ds.image_len() {
        return Err(DataError::Malformed("pixel payload does not match N·C·H·W".into()));
    }
    if ds.labels.iter().any(|&l| l as usize >= ds.num_classes()) {
        return Err(DataError::Malformed("label outside class table".into()));
    }
    let mut out = Vec::with_capacity(ds.images.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &ds.domain_tag)?;
    out.push(match ds.split {
        Split::Base => 0,
        Split::Novel => 1,
    });
    out.extend_from_slice(&u32::try_from(ds.len()).map_err(|_| DataError::Malformed("too many images".into()))?.to_le_bytes());
    for (v, what) in [(ds.channels, "C"), (ds.height, "H"), (ds.width, "W"), (ds.num_classes(), "class count")] {
        out.extend_from_slice(&dim(v, what)?.to_le_bytes());
    }
    for name in &ds.class_names {
        put_str(&mut out, name)?;
    }
    for l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&ds.images);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).ok_or(DataError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(DataError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String, DataError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| DataError::Malformed("string is not UTF-8".into()))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DataError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| DataError::BadMagic)? != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(DataError::Version(version));
    }
    let domain_tag = r.string()?;
    let split = match r.take(1)?[0] {
        0 => Split::Base,
        1 => Split::Novel,
        s => return Err(DataError::Malformed(format!("split tag {s}"))),
    };
    let n = r.u32()? as usize;
    let (channels, height, width) = (r.u16()? as usize, r.u16()? as usize, r.u16()? as usize);
    let classes = r.u16()? as usize;
    let class_names = (0..classes).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
    let labels = r
        .take(n.checked_mul(4).ok_or(DataError::Truncated)?)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>();
    let payload = n
        .checked_mul(channels)
        .and_then(|v| v.checked_mul(height))
        .and_then(|v| v.checked_mul(width))
        .ok_or(DataError::Truncated)?;
    let images = r.take(payload)?.to_vec();
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(DataError::TrailingBytes(bytes.len() - r.pos));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(DataError::Checksum { stored, computed });
    }
    if labels.iter().any(|&l| l as usize >= classes) {
        return Err(DataError::Malformed("label outside class table".into()));
    }
    Ok(Dataset { images, labels, class_names, domain_tag, split, channels, height, width })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    decode_dataset(&std::fs::read(path)?)
}
