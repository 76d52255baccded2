//! Labelled datasets, their loaders and the client partitioner.

mod blobs;
mod idx;
mod partition;

pub use blobs::synthetic_blobs;
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IMAGE_MAGIC, LABEL_MAGIC};
pub use partition::{dirichlet_partition, single_shard, ClientShard, PartitionSpec};

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Inputs (one row per sample) with integer class labels in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidInput(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        histogram(self.labels.iter().copied(), self.class_count)
    }

    /// Histogram of the labels at `indices`.
    pub fn class_histogram_of(&self, indices: &[usize]) -> Vec<usize> {
        histogram(indices.iter().map(|&i| self.labels[i]), self.class_count)
    }

    /// Copies the rows at `indices` into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.inputs.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let (inputs, labels) = self.gather(indices);
        LabeledDataset {
            inputs,
            labels,
            class_count: self.class_count,
        }
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            inputs: self.inputs.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
        }
    }

    /// Shrinks square images: crops `crop` pixels from every border, then
    /// averages non-overlapping `pool × pool` blocks.
    pub fn downsample_square(&self, crop: usize, pool: usize) -> Result<LabeledDataset> {
        let side = (self.dim() as f64).sqrt() as usize;
        if side * side != self.dim() {
            return Err(Error::InvalidInput(format!(
                "inputs of length {} are not square images",
                self.dim()
            )));
        }
        if pool == 0 || 2 * crop >= side || !(side - 2 * crop).is_multiple_of(pool) {
            return Err(Error::InvalidInput(format!(
                "cannot crop {crop} and pool {pool} on a {side}x{side} image"
            )));
        }
        let inner = side - 2 * crop;
        let out_side = inner / pool;
        let scale = 1.0 / (pool * pool) as f64;
        let mut out = Array2::zeros((self.len(), out_side * out_side));
        for (src, mut dst) in self.inputs.rows().into_iter().zip(out.rows_mut()) {
            for r in 0..inner {
                for c in 0..inner {
                    let v = src[(r + crop) * side + c + crop];
                    dst[(r / pool) * out_side + c / pool] += v * scale;
                }
            }
        }
        Ok(LabeledDataset {
            inputs: out,
            labels: self.labels.clone(),
            class_count: self.class_count,
        })
    }
}

fn histogram(labels: impl Iterator<Item = usize>, k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for y in labels {
        counts[y] += 1;
    }
    counts
}
