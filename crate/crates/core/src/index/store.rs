//! `vectors.bin` encoding.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "SIVX" | version u32 = 1 | dim u32 | count u64
//! count × ( id_len u16 | id bytes (UTF-8) | dim × f32 )
//! crc32 u32   -- IEEE CRC-32 of every preceding byte
//! ```

use std::io::Write;
use std::path::Path;

use super::{IndexEntry, IndexError};
use crate::embed::EmbeddingVector;

pub const MAGIC: &[u8; 4] = b"SIVX";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

pub fn encode(entries: &[IndexEntry]) -> Result<Vec<u8>, IndexError> {
    let dim = entries.first().map_or(0, |e| e.vector.dim());
    let mut buf = Vec::with_capacity(HEADER_LEN + entries.len() * (dim * 4 + 16) + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        if e.vector.dim() != dim {
            return Err(IndexError::DimMismatch {
                expected: dim,
                got: e.vector.dim(),
            });
        }
        let id = e.chunk_id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| IndexError::CorruptFile(format!("chunk id too long: {} bytes", id.len())))?;
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(id);
        for v in e.vector.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IndexError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| IndexError::CorruptFile(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16, IndexError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a whole file. Structural damage (bad magic, version or length)
/// yields `CorruptFile`; a well-formed file whose checksum does not match
/// yields `ChecksumMismatch`. Nothing is returned on failure.
pub fn decode(bytes: &[u8]) -> Result<Vec<IndexEntry>, IndexError> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(IndexError::CorruptFile(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(IndexError::CorruptFile("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(IndexError::CorruptFile(format!("unsupported format version {version}")));
    }
    let dim = r.u32("dim")? as usize;
    let count = r.u64("count")?;
    let per_entry_min = 2 + dim * 4;
    if count
        .checked_mul(per_entry_min as u64)
        .is_none_or(|need| need > (body.len() - HEADER_LEN) as u64)
    {
        return Err(IndexError::CorruptFile(format!("count {count} does not fit the file length")));
    }

    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id_len = r.u16("id length")? as usize;
        let id = std::str::from_utf8(r.take(id_len, "id")?)
            .map_err(|_| IndexError::CorruptFile("chunk id is not UTF-8".into()))?
            .to_string();
        let raw = r.take(dim * 4, "vector")?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.push(IndexEntry {
            chunk_id: id,
            vector: EmbeddingVector::from_raw(values),
        });
    }
    if r.pos != body.len() {
        return Err(IndexError::CorruptFile(format!(
            "{} trailing bytes after {count} entries",
            body.len() - r.pos
        )));
    }
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(IndexError::ChecksumMismatch { stored, computed });
    }
    Ok(entries)
}

/// Writes `entries` atomically (temp file + rename).
pub fn save(entries: &[IndexEntry], path: &Path) -> Result<(), IndexError> {
    let bytes = encode(entries)?;
    let tmp = path.with_extension("bin.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<IndexEntry>, IndexError> {
    decode(&std::fs::read(path)?)
}
