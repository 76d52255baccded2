//! Big-endian IDX files as distributed for MNIST.

use std::path::Path;

use ndarray::Array2;

use super::LabeledDataset;
use crate::error::{Error, IdxError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn need(path: &Path, bytes: &[u8], expected: usize) -> Result<(), IdxError> {
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    need(path, bytes, 4)?;
    let found = be_u32(bytes, 0);
    if found != expected {
        return Err(IdxError::WrongMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Decodes an image file into rows of pixels scaled by `1/255`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<Array2<f64>, IdxError> {
    check_magic(path, bytes, IMAGE_MAGIC)?;
    need(path, bytes, 16)?;
    let count = be_u32(bytes, 4) as usize;
    let pixels = be_u32(bytes, 8) as usize * be_u32(bytes, 12) as usize;
    need(path, bytes, 16 + count * pixels)?;
    let data = bytes[16..16 + count * pixels]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(Array2::from_shape_vec((count, pixels), data).expect("sizes checked"))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    check_magic(path, bytes, LABEL_MAGIC)?;
    need(path, bytes, 8)?;
    let count = be_u32(bytes, 4) as usize;
    need(path, bytes, 8 + count)?;
    Ok(bytes[8..8 + count].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair. The class count is one past the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let inputs = parse_idx_images(images_path, &image_bytes)?;
    let labels = parse_idx_labels(labels_path, &label_bytes)?;
    if inputs.nrows() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: inputs.nrows(),
            labels: labels.len(),
        }
        .into());
    }
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    LabeledDataset::new(inputs, labels, class_count)
}
