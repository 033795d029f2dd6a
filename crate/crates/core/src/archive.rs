//! Binary container shared by checkpoints, LTE caches and memory archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [8-byte magic][u64 manifest length][manifest: UTF-8 JSON][payload bytes]
//! ```
//!
//! Payloads are raw little-endian `f32` (or `u32` for labels) blobs whose
//! offsets are recorded in the manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LNDRCKPT";
pub const LTE_MAGIC: &[u8; 8] = b"LNDRLTE1";
pub const MEMORY_MAGIC: &[u8; 8] = b"LNDRMEM1";

pub fn write<M: Serialize>(path: &Path, magic: &[u8; 8], manifest: &M, payload: &[u8]) -> Result<()> {
    let manifest = serde_json::to_vec(manifest)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(magic)?;
    file.write_all(&(manifest.len() as u64).to_le_bytes())?;
    file.write_all(&manifest)?;
    file.write_all(payload)?;
    file.flush()?;
    Ok(())
}

pub fn read<M: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(M, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = |reason: &str| Error::Archive {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 {
        return Err(bad("truncated header"));
    }
    if &bytes[..8] != magic {
        return Err(bad("wrong magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(len).ok_or_else(|| bad("manifest length overflow"))?;
    if bytes.len() < end {
        return Err(bad("truncated manifest"));
    }
    let manifest = serde_json::from_slice(&bytes[16..end])?;
    Ok((manifest, bytes[end..].to_vec()))
}

pub fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f32s(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::BadShape(format!("{} bytes is not a whole number of f32", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn u32s_to_bytes(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_u32s(bytes: &[u8]) -> Result<Vec<u32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::BadShape(format!("{} bytes is not a whole number of u32", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        write(&path, LTE_MAGIC, &vec![1, 2, 3], &f32s_to_bytes(&[1.5, -2.0])).unwrap();
        let (m, payload): (Vec<i32>, _) = read(&path, LTE_MAGIC).unwrap();
        assert_eq!(m, vec![1, 2, 3]);
        assert_eq!(bytes_to_f32s(&payload).unwrap(), vec![1.5, -2.0]);
        assert!(read::<Vec<i32>>(&path, MEMORY_MAGIC).is_err());

        std::fs::write(&path, b"LNDRLTE1\xff").unwrap();
        assert!(read::<Vec<i32>>(&path, LTE_MAGIC).is_err());
    }
}
