//! Record framing for the append-only log.
//!
//! ```text
//! header   "RFSTORE\0" | format_version u32 LE          (12 bytes, once)
//! frame    payload_len u32 LE | crc32(payload) u32 LE | payload
//! ```

use std::fs::File;
use std::os::unix::fs::FileExt;

use crate::{Result, StoreError};

pub const LOG_MAGIC: &[u8; 8] = b"RFSTORE\0";
pub const FORMAT_VERSION: u32 = 1;
pub(crate) const HEADER_LEN: u64 = 12;
const FRAME_HEADER: u64 = 8;
/// Guards against reading a garbage length as a huge allocation.
const MAX_PAYLOAD: u32 = 64 << 20;

pub(crate) fn header() -> [u8; HEADER_LEN as usize] {
    let mut h = [0u8; HEADER_LEN as usize];
    h[..8].copy_from_slice(LOG_MAGIC);
    h[8..].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    h
}

pub(crate) fn check_header(h: &[u8]) -> Result<()> {
    if h.len() < HEADER_LEN as usize || &h[..8] != LOG_MAGIC {
        return Err(StoreError::Corrupt("log does not start with the store header".into()));
    }
    let found = u32::from_le_bytes(h[8..12].try_into().expect("4 bytes"));
    if found != FORMAT_VERSION {
        return Err(StoreError::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

pub(crate) fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + FRAME_HEADER as usize);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Reads the frame at `offset`. `Ok(None)` means the bytes there do not form
/// a complete, checksummed frame (a torn or corrupt tail).
pub(crate) fn read_frame(file: &File, offset: u64, file_len: u64) -> Result<Option<Vec<u8>>> {
    if offset + FRAME_HEADER > file_len {
        return Ok(None);
    }
    let mut head = [0u8; FRAME_HEADER as usize];
    file.read_exact_at(&mut head, offset)?;
    let len = u32::from_le_bytes(head[..4].try_into().expect("4 bytes"));
    let crc = u32::from_le_bytes(head[4..].try_into().expect("4 bytes"));
    if len > MAX_PAYLOAD || offset + FRAME_HEADER + len as u64 > file_len {
        return Ok(None);
    }
    let mut payload = vec![0u8; len as usize];
    file.read_exact_at(&mut payload, offset + FRAME_HEADER)?;
    if crc32fast::hash(&payload) != crc {
        return Ok(None);
    }
    Ok(Some(payload))
}

pub(crate) fn frame_len(payload_len: usize) -> u64 {
    FRAME_HEADER + payload_len as u64
}
