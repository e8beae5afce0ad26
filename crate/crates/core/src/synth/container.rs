//! Length-prefixed, checksummed record container.
//!
//! Layout: 8-byte magic, `u32` record count, then per record a `u32` payload
//! length, the payload, and the CRC32 of the payload. Integers are little
//! endian.

use std::path::Path;

use crate::error::{DanError, Result};

pub const MAGIC: &[u8; 8] = b"DANSYN01";
const FAMILY: &[u8] = b"DANSYN";

pub fn encode_container(records: &[Vec<u8>]) -> Vec<u8> {
    let body: usize = records.iter().map(|r| r.len() + 8).sum();
    let mut out = Vec::with_capacity(12 + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.len() as u32).to_le_bytes());
        out.extend_from_slice(r);
        out.extend_from_slice(&crc32fast::hash(r).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], pos: usize) -> Option<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
}

pub fn decode_container(bytes: &[u8], path: &Path) -> Result<Vec<Vec<u8>>> {
    let malformed = |reason: &str| DanError::MalformedFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < MAGIC.len() {
        return Err(malformed("shorter than the header"));
    }
    let magic = &bytes[..MAGIC.len()];
    if magic != MAGIC {
        if magic.starts_with(FAMILY) {
            return Err(DanError::VersionMismatch {
                path: path.to_path_buf(),
                found: String::from_utf8_lossy(magic).into_owned(),
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
            });
        }
        return Err(malformed("not a dataset container (bad magic)"));
    }
    let count = read_u32(bytes, 8).ok_or_else(|| malformed("missing record count"))? as usize;
    let mut pos = 12;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for record in 0..count {
        let truncated = || DanError::MalformedRecord {
            path: path.to_path_buf(),
            record,
            reason: "truncated".into(),
        };
        let len = read_u32(bytes, pos).ok_or_else(truncated)? as usize;
        pos += 4;
        let payload = bytes.get(pos..pos + len).ok_or_else(truncated)?;
        pos += len;
        let crc = read_u32(bytes, pos).ok_or_else(truncated)?;
        pos += 4;
        if crc32fast::hash(payload) != crc {
            return Err(DanError::Checksum {
                path: path.to_path_buf(),
                record,
            });
        }
        records.push(payload.to_vec());
    }
    if pos != bytes.len() {
        return Err(malformed("trailing bytes after the last record"));
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[Vec<u8>]) -> Result<()> {
    std::fs::write(path, encode_container(records)).map_err(|e| DanError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Vec<u8>>> {
    let bytes = std::fs::read(path).map_err(|e| DanError::io(path, e))?;
    decode_container(&bytes, path)
}
