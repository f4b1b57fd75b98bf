//! VXG1 volume files.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Volume;
use crate::error::{Result, SspError};

pub const VXG_MAGIC: &[u8; 8] = b"VXGRID01";
pub const VXG_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4 + 3 * 4;

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * v.len());
    buf.extend_from_slice(VXG_MAGIC);
    buf.extend_from_slice(&VXG_VERSION.to_le_bytes());
    for d in v.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.voxel_size() {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    for x in v.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn f32_at(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 8 || &bytes[..8] != VXG_MAGIC {
        return Err(SspError::MalformedHeader("missing VXGRID01 magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(SspError::MalformedHeader(format!("header is {} bytes, need {HEADER_LEN}", bytes.len())));
    }
    let version = u32_at(bytes, 8);
    if version != VXG_VERSION {
        return Err(SspError::UnsupportedVersion { found: version, expected: VXG_VERSION });
    }
    let dims = [u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize, u32_at(bytes, 20) as usize];
    if dims.contains(&0) {
        return Err(SspError::MalformedHeader(format!("zero extent in {dims:?}")));
    }
    let voxel_size = [f32_at(bytes, 24), f32_at(bytes, 28), f32_at(bytes, 32)];
    if voxel_size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(SspError::MalformedHeader(format!("voxel size {voxel_size:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| SspError::MalformedHeader(format!("extent overflow {dims:?}")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < count {
        return Err(SspError::TruncatedPayload { expected: count, found: payload.len() });
    }
    if payload.len() > count {
        return Err(SspError::CorruptPayload(format!("{} trailing bytes", payload.len() - count)));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Volume::new(dims, data, voxel_size)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_volume(v))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}
