//! Label-skewed client partitions.
//!
//! Every client draws a class distribution `q_n ~ Dir(α/K, …, α/K)` and owns an
//! equal share of the training set. Clients fill their share in order, taking
//! classes in proportion to `q_n` among the classes that still have samples
//! left (largest-remainder rounding). Class counts are preserved exactly and no
//! shard can be empty.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub client_count: usize,
    /// Dirichlet concentration; small values give near single-class clients.
    pub alpha: f64,
    pub seed: u64,
}

/// Indices of one client's samples and its weight `m_n / m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub indices: Vec<usize>,
    pub weight: f64,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The whole dataset as one shard.
pub fn single_shard(ds: &LabeledDataset) -> ClientShard {
    ClientShard {
        indices: (0..ds.len()).collect(),
        weight: 1.0,
    }
}

/// `ln` of a `Dir(a, …, a)` draw of length `k`.
///
/// Uses `Gamma(a) = Gamma(a + 1) · U^(1/a)` in log space so that tiny
/// concentrations do not underflow to an all-zero vector.
fn log_dirichlet<R: Rng>(rng: &mut R, a: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(a + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            g.ln() + u.ln() / a
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logs.into_iter().map(|l| l - norm).collect()
}

/// Splits `total` into integers proportional to `weights` (largest remainder,
/// ties to the lower index). Weights must not all be zero.
pub(crate) fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

pub fn dirichlet_partition(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    let n = spec.client_count;
    let m = ds.len();
    let k = ds.class_count();
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        return Err(Error::InvalidSpec(format!(
            "alpha must be positive, got {}",
            spec.alpha
        )));
    }
    if n < 2 {
        return Err(Error::InvalidSpec(format!(
            "need at least 2 clients, got {n}"
        )));
    }
    if n > m {
        return Err(Error::InvalidSpec(format!(
            "{n} clients but only {m} samples"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let concentration = spec.alpha / k as f64;
    let log_q: Vec<Vec<f64>> = (0..n)
        .map(|_| log_dirichlet(&mut rng, concentration, k))
        .collect();

    let quotas = apportion(m, &vec![1.0; n]);
    let mut remaining = ds.class_histogram();
    let mut counts = vec![vec![0usize; k]; n];
    for client in 0..n {
        let mut need = quotas[client];
        while need > 0 {
            let open: Vec<usize> = (0..k).filter(|&c| remaining[c] > 0).collect();
            let top = open
                .iter()
                .map(|&c| log_q[client][c])
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = open.iter().map(|&c| (log_q[client][c] - top).exp()).collect();
            let share = apportion(need, &weights);
            for (&c, &want) in open.iter().zip(&share) {
                let take = want.min(remaining[c]);
                counts[client][c] += take;
                remaining[c] -= take;
                need -= take;
            }
        }
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (class, pool) in by_class.iter_mut().enumerate() {
        pool.shuffle(&mut rng);
        let mut cursor = 0;
        for client in 0..n {
            let take = counts[client][class];
            shards[client].extend_from_slice(&pool[cursor..cursor + take]);
            cursor += take;
        }
    }

    Ok(shards
        .into_iter()
        .map(|mut indices| {
            indices.sort_unstable();
            let weight = indices.len() as f64 / m as f64;
            ClientShard { indices, weight }
        })
        .collect())
}
