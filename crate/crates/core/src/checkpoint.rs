//! Checkpoint container: a flat dictionary of named f32 arrays.
//!
//! Layout, all little-endian: magic `PDCK`, version `u32`, then entries of
//! `name_len: u16`, UTF-8 name, `rank: u8`, `rank` dims as `u32`, and the
//! payload as f32 values, repeated until end of file. Entry order is the
//! writer's responsibility; the writers in this crate emit a fixed parameter
//! walk order so identical models serialize to identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PDCK";
pub const VERSION: u32 = 1;

/// Encode named tensors to checkpoint bytes (f64 values narrowed to f32).
pub fn encode_entries(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        assert!(name_bytes.len() <= u16::MAX as usize, "name too long");
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        assert!(tensor.rank() <= u8::MAX as usize, "rank too large");
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Decode checkpoint bytes back into named tensors (f32 widened to f64).
pub fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload);
    }
    if &bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic {
            expected: "PDCK",
            found,
        });
    }
    let mut pos = 4usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::TruncatedPayload);
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::BadVersion {
            expected: VERSION,
            found: version,
        });
    }
    let mut entries = Vec::new();
    while pos < bytes.len() {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::InvalidArgument("checkpoint name is not UTF-8".into()))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let payload = take(&mut pos, count * 4)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        entries.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok(entries)
}

pub fn save_named(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_entries(entries))?;
    Ok(())
}

pub fn load_named(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    decode_entries(&bytes)
}
