//! Binary posterior snapshots.
//!
//! Layout, little-endian: `b"FOLA"`, version `u32`, dimension `u64`, then the
//! `f64` mean followed by the `f64` precision.

use std::io::Write;
use std::path::Path;

use super::DiagGaussian;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FOLA";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_checkpoint(g: &DiagGaussian) -> Vec<u8> {
    let d = g.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 16 * d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for v in g.mean().iter().chain(g.precision()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DiagGaussian> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checkpoint(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let d = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected = d
        .checked_mul(16)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Checkpoint(format!("dimension {d} overflows")))?;
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} bytes for d = {d}, found {}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (mean, precision) = values.split_at(d);
    DiagGaussian::new(mean.to_vec(), precision.to_vec())
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_checkpoint(path: impl AsRef<Path>, g: &DiagGaussian) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(&encode_checkpoint(g))?;
        file.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<DiagGaussian> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
