use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::LabeledDataset;

/// `k` Gaussian clusters in `dim` dimensions, `per_class` samples each.
///
/// Cluster means are standard-normal draws; samples add `spread`-scaled
/// standard-normal noise. Samples are interleaved by class.
pub fn synthetic_blobs(k: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let m = k * per_class;
    let mut inputs = Array2::zeros((m, dim));
    let mut labels = Vec::with_capacity(m);
    for i in 0..per_class {
        for (class, mean) in means.iter().enumerate() {
            let row = i * k + class;
            for (j, &mu) in mean.iter().enumerate() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                inputs[[row, j]] = mu + spread * noise;
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(inputs, labels, k).expect("labels are in range by construction")
}
