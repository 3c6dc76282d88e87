//! Binary map checkpoint.
//!
//! Little-endian: magic `WSPL`, `u32` version, `u64` primitive count, then
//! per primitive 14 `f32` attributes (see [`primitive_to_array`]) and a `u32`
//! anchor; then every medium-network parameter as `f32` in storage order
//! (layer-major, weights `out × in` row-major, then bias); then the keyframe
//! trajectory as text until end of file.

use std::path::Path;

use super::{primitive_from_array, primitive_to_array, GaussianMap};
use crate::error::FormatError;
use crate::medium::MediumNetParams;
use crate::scene::trajectory::{format_trajectory, parse_trajectory, TrajectoryEntry};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WSPL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub map: GaussianMap,
    pub trajectory: Vec<TrajectoryEntry>,
}

pub fn encode_checkpoint(map: &GaussianMap, trajectory: &[TrajectoryEntry]) -> Vec<u8> {
    let n_params = MediumNetParams::param_count();
    let mut out = Vec::with_capacity(16 + map.len() * 60 + n_params * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.len() as u64).to_le_bytes());
    for p in &map.primitives {
        for v in primitive_to_array(p) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&p.anchor.to_le_bytes());
    }
    for v in map.medium.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(format_trajectory(trajectory).as_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::malformed(
                self.path,
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f64, FormatError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as f64)
    }
}

/// Decodes checkpoint bytes; `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint, FormatError> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(FormatError::malformed(path, 0, "not a map checkpoint (bad magic)"));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::malformed(path, 4, format!("unsupported checkpoint version {version}")));
    }
    let count = u64::from_le_bytes(c.take(8, "primitive count")?.try_into().unwrap());
    let needed = count.saturating_mul(60);
    if needed > (bytes.len() - c.pos) as u64 {
        return Err(FormatError::malformed(
            path,
            8,
            format!("primitive count {count} exceeds the file size"),
        ));
    }
    let mut primitives = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut a = [0.0; 14];
        for v in &mut a {
            *v = c.f32("primitive")?;
        }
        let anchor = c.u32("anchor")?;
        primitives.push(primitive_from_array(&a, anchor));
    }
    let n_params = MediumNetParams::param_count();
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(c.f32("medium parameters")?);
    }
    let medium = MediumNetParams::from_vec(params).expect("parameter count is fixed");
    let text = std::str::from_utf8(&bytes[c.pos..])
        .map_err(|e| FormatError::malformed(path, (c.pos + e.valid_up_to()) as u64, "trajectory is not UTF-8"))?;
    let trajectory = parse_trajectory(text, path)?;
    Ok(Checkpoint {
        map: GaussianMap::with_primitives(primitives, medium),
        trajectory,
    })
}

pub fn write_checkpoint(path: &Path, map: &GaussianMap, trajectory: &[TrajectoryEntry]) -> Result<(), FormatError> {
    std::fs::write(path, encode_checkpoint(map, trajectory)).map_err(|e| FormatError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, FormatError> {
    let bytes = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
