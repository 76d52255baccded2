//! Gaussian posterior algebra.
//!
//! Local and global posteriors are diagonal Gaussians stored as a mean and a
//! precision vector (the diagonal of `Σ⁻¹`). Fusing them multiplies the
//! weighted densities: `Σ_S⁻¹ = Σ πₙ Σₙ⁻¹` and `μ_S = Σ_S Σ πₙ Σₙ⁻¹ μₙ`.
//! Collapsing the mixture `Σ πₙ qₙ` onto its first two moments instead gives
//! plain weighted averaging of the means.

mod checkpoint;
mod dense;
mod ridge;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use dense::{
    dense_product_aggregate, efull_from_dense, full_hessian_softmax, DenseGaussian,
    DEFAULT_DENSE_CAP,
};
pub use ridge::{mixture_density_grad, responsibility_alpha, ridge_line};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::ParamVector;

/// Aggregate precisions below this raise [`Error::DegeneratePrecision`].
pub const PRECISION_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Gaussian with diagonal covariance, parameterised by mean and precision.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: ParamVector,
    precision: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: impl Into<ParamVector>, precision: Vec<f64>) -> Result<Self> {
        let mean = mean.into();
        if mean.len() != precision.len() {
            return Err(Error::InvalidInput(format!(
                "mean has length {} but precision has length {}",
                mean.len(),
                precision.len()
            )));
        }
        if !mean.is_finite() {
            return Err(Error::InvalidInput("mean has non-finite entries".into()));
        }
        if let Some(i) = precision.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "precision entry {i} is {} (must be finite and nonnegative)",
                precision[i]
            )));
        }
        Ok(DiagGaussian { mean, precision })
    }

    /// `N(mean, (1/precision)·I)`.
    pub fn isotropic(mean: impl Into<ParamVector>, precision: f64) -> Result<Self> {
        let mean = mean.into();
        let d = mean.len();
        Self::new(mean, vec![precision; d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &ParamVector {
        &self.mean
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn into_parts(self) -> (ParamVector, Vec<f64>) {
        (self.mean, self.precision)
    }

    pub fn variance(&self) -> Vec<f64> {
        self.precision.iter().map(|p| 1.0 / p).collect()
    }

    /// Log density; `-inf` when some precision is zero.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((&t, &m), &p) in theta.iter().zip(self.mean.iter()).zip(&self.precision) {
            let diff = t - m;
            acc += p.ln() - LN_2PI - p * diff * diff;
        }
        0.5 * acc
    }

    fn sample<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        for ((o, &m), &p) in out.iter_mut().zip(self.mean.iter()).zip(&self.precision) {
            let z: f64 = StandardNormal.sample(rng);
            *o = m + z / p.sqrt();
        }
    }
}

/// Local posteriors paired with their client weights `πₙ`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPosteriorSet {
    members: Vec<(f64, DiagGaussian)>,
}

impl WeightedPosteriorSet {
    pub fn new(members: Vec<(f64, DiagGaussian)>) -> Result<Self> {
        let Some((_, first)) = members.first() else {
            return Err(Error::InvalidInput("empty posterior set".into()));
        };
        let d = first.dim();
        if members.iter().any(|(_, g)| g.dim() != d) {
            return Err(Error::InvalidInput("posteriors differ in dimension".into()));
        }
        if let Some((w, _)) = members.iter().find(|(w, _)| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidInput(format!("weight {w} outside [0, 1]")));
        }
        let total: f64 = members.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("weights sum to {total}, not 1")));
        }
        Ok(WeightedPosteriorSet { members })
    }

    pub fn dim(&self) -> usize {
        self.members[0].1.dim()
    }

    pub fn members(&self) -> &[(f64, DiagGaussian)] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Log density of the mixture `Σ πₙ qₙ(θ)`.
    pub fn mixture_log_density(&self, theta: &[f64]) -> f64 {
        let logs: Vec<f64> = self
            .members
            .iter()
            .filter(|(w, _)| *w > 0.0)
            .map(|(w, g)| w.ln() + g.log_density(theta))
            .collect();
        log_sum_exp(&logs)
    }

    /// `Σ πₙ ln qₙ(θ)`, the log of the unnormalised product density.
    pub fn product_log_density(&self, theta: &[f64]) -> f64 {
        self.members
            .iter()
            .filter(|(w, _)| *w > 0.0)
            .map(|(w, g)| w * g.log_density(theta))
            .sum()
    }

    fn sample<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = &self.members.last().unwrap().1;
        for (w, g) in &self.members {
            acc += w;
            if u < acc {
                chosen = g;
                break;
            }
        }
        chosen.sample(rng, out);
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Precision-weighted fusion of weighted diagonal Gaussians.
pub(crate) fn fuse_diag<'a>(
    members: impl IntoIterator<Item = (f64, &'a DiagGaussian)>,
    d: usize,
) -> Result<DiagGaussian> {
    let mut precision = vec![0.0; d];
    let mut weighted_mean = vec![0.0; d];
    for (w, g) in members {
        for j in 0..d {
            let p = w * g.precision[j];
            precision[j] += p;
            weighted_mean[j] += p * g.mean[j];
        }
    }
    let degenerate: Vec<usize> = (0..d).filter(|&j| !(precision[j] >= PRECISION_FLOOR)).collect();
    if !degenerate.is_empty() {
        return Err(Error::DegeneratePrecision {
            indices: degenerate,
        });
    }
    let mean: Vec<f64> = weighted_mean
        .iter()
        .zip(&precision)
        .map(|(m, p)| m / p)
        .collect();
    DiagGaussian::new(mean, precision)
}

/// Mode and precision of `Π qₙ(θ)^πₙ`, coordinate by coordinate.
pub fn product_aggregate(set: &WeightedPosteriorSet) -> Result<DiagGaussian> {
    fuse_diag(set.members.iter().map(|(w, g)| (*w, g)), set.dim())
}

/// Moment-matched collapse of the mixture onto one Gaussian.
///
/// The mean is `Σ πₙ μₙ` (federated averaging). With `track_covariance` the
/// variance is the diagonal of `Σ πₙ (Σₙ + μₙμₙᵀ − μ_Sμ_Sᵀ)`; otherwise the
/// precision is the identity.
pub fn collapse_aggregate(set: &WeightedPosteriorSet, track_covariance: bool) -> DiagGaussian {
    let d = set.dim();
    let mut mean = vec![0.0; d];
    for (w, g) in &set.members {
        for (m, gm) in mean.iter_mut().zip(g.mean.iter()) {
            *m += w * gm;
        }
    }
    let precision = if track_covariance {
        let mut variance = vec![0.0; d];
        for (w, g) in &set.members {
            for j in 0..d {
                let spread = g.mean[j] - mean[j];
                variance[j] += w * (1.0 / g.precision[j] + spread * spread);
            }
        }
        variance.iter().map(|v| 1.0 / v).collect()
    } else {
        vec![1.0; d]
    };
    DiagGaussian { mean: mean.into(), precision }
}

/// Monte-Carlo estimate of `KL(Σ πₙ qₙ ‖ candidate)`.
pub fn kl_mixture_to_gaussian(
    set: &WeightedPosteriorSet,
    candidate: &DiagGaussian,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    Ok(kl_estimate(set, &[candidate], mc_samples, seed)?[0].mean)
}

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Paired estimate of `KL(mix ‖ a) − KL(mix ‖ b)` from common samples.
pub fn kl_difference(
    set: &WeightedPosteriorSet,
    a: &DiagGaussian,
    b: &DiagGaussian,
    mc_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    let diffs = mc_log_ratio_samples(set, &[a, b], mc_samples, seed)?;
    let values: Vec<f64> = diffs.iter().map(|v| v[0] - v[1]).collect();
    Ok(mean_and_se(&values))
}

/// Paired estimates of `KL(mix ‖ c) − KL(mix ‖ reference)` for every
/// candidate, all from one shared sample.
pub fn kl_excess(
    set: &WeightedPosteriorSet,
    reference: &DiagGaussian,
    candidates: &[DiagGaussian],
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<McEstimate>> {
    let mut all = vec![reference];
    all.extend(candidates);
    let samples = mc_log_ratio_samples(set, &all, mc_samples, seed)?;
    Ok((1..all.len())
        .map(|c| {
            let values: Vec<f64> = samples.iter().map(|s| s[c] - s[0]).collect();
            mean_and_se(&values)
        })
        .collect())
}

fn kl_estimate(
    set: &WeightedPosteriorSet,
    candidates: &[&DiagGaussian],
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<McEstimate>> {
    let samples = mc_log_ratio_samples(set, candidates, mc_samples, seed)?;
    Ok((0..candidates.len())
        .map(|c| {
            let values: Vec<f64> = samples.iter().map(|s| s[c]).collect();
            mean_and_se(&values)
        })
        .collect())
}

/// Per-sample `ln p_mix(θ) − ln q_c(θ)` for each candidate, `θ ~ p_mix`.
fn mc_log_ratio_samples(
    set: &WeightedPosteriorSet,
    candidates: &[&DiagGaussian],
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if mc_samples == 0 {
        return Err(Error::InvalidInput("need at least one Monte-Carlo sample".into()));
    }
    if candidates.iter().any(|c| c.dim() != set.dim()) {
        return Err(Error::InvalidInput("candidate dimension differs from the mixture".into()));
    }
    if set
        .members
        .iter()
        .any(|(w, g)| *w > 0.0 && g.precision.iter().any(|&p| p <= 0.0))
    {
        return Err(Error::InvalidInput(
            "cannot sample a component with zero precision".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0.0; set.dim()];
    Ok((0..mc_samples)
        .map(|_| {
            set.sample(&mut rng, &mut theta);
            let log_p = set.mixture_log_density(&theta);
            candidates
                .iter()
                .map(|c| log_p - c.log_density(&theta))
                .collect()
        })
        .collect())
}

fn mean_and_se(values: &[f64]) -> McEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    McEstimate {
        mean,
        std_error: (var / n).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(mean: &[f64], precision: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mean.to_vec(), precision.to_vec()).unwrap()
    }

    fn set(members: Vec<(f64, DiagGaussian)>) -> WeightedPosteriorSet {
        WeightedPosteriorSet::new(members).unwrap()
    }

    #[test]
    fn validation() {
        assert!(DiagGaussian::new(vec![0.0], vec![-1.0]).is_err());
        assert!(DiagGaussian::new(vec![f64::NAN], vec![1.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(WeightedPosteriorSet::new(vec![(0.5, g(&[0.0], &[1.0]))]).is_err());
        assert!(WeightedPosteriorSet::new(vec![
            (0.5, g(&[0.0], &[1.0])),
            (0.5, g(&[0.0, 1.0], &[1.0, 1.0]))
        ])
        .is_err());
    }

    #[test]
    fn product_of_identical_gaussians_is_idempotent() {
        let q = g(&[1.0, -2.0, 0.5], &[3.0, 0.5, 2.0]);
        let out = product_aggregate(&set(vec![(0.3, q.clone()), (0.7, q.clone())])).unwrap();
        for j in 0..3 {
            assert!((out.mean()[j] - q.mean()[j]).abs() < 1e-15);
            assert!((out.precision()[j] - q.precision()[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn product_hand_cases() {
        let sym = product_aggregate(&set(vec![
            (0.5, g(&[0.0], &[1.0])),
            (0.5, g(&[2.0], &[1.0])),
        ]))
        .unwrap();
        assert_eq!(sym.mean()[0], 1.0);
        assert_eq!(sym.precision()[0], 1.0);

        let skew = product_aggregate(&set(vec![
            (0.5, g(&[0.0], &[4.0])),
            (0.5, g(&[2.0], &[1.0])),
        ]))
        .unwrap();
        assert!((skew.precision()[0] - 2.5).abs() < 1e-15);
        assert!((skew.mean()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn product_reports_degenerate_coordinates() {
        let err = product_aggregate(&set(vec![
            (0.5, g(&[0.0, 1.0, 2.0], &[1.0, 0.0, 0.0])),
            (0.5, g(&[0.0, 1.0, 2.0], &[1.0, 0.0, 1e-13])),
        ]))
        .unwrap_err();
        match err {
            Error::DegeneratePrecision { indices } => assert_eq!(indices, vec![1, 2]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn collapse_hand_cases() {
        let out = collapse_aggregate(
            &set(vec![(0.5, g(&[0.0], &[1.0])), (0.5, g(&[2.0], &[1.0]))]),
            true,
        );
        assert_eq!(out.mean()[0], 1.0);
        assert!((1.0 / out.precision()[0] - 2.0).abs() < 1e-15);

        let untracked = collapse_aggregate(
            &set(vec![(0.5, g(&[0.0], &[1.0])), (0.5, g(&[2.0], &[1.0]))]),
            false,
        );
        assert_eq!(untracked.precision(), &[1.0]);

        let first = collapse_aggregate(
            &set(vec![(1.0, g(&[3.0], &[1.0])), (0.0, g(&[-7.0], &[9.0]))]),
            true,
        );
        assert_eq!(first.mean()[0], 3.0);
    }

    #[test]
    fn collapse_with_equal_means_averages_variances() {
        let out = collapse_aggregate(
            &set(vec![(0.25, g(&[1.0, 1.0], &[1.0, 4.0])), (0.75, g(&[1.0, 1.0], &[0.5, 2.0]))]),
            true,
        );
        assert_eq!(out.mean().to_vec(), vec![1.0, 1.0]);
        let var = out.variance();
        assert!((var[0] - (0.25 * 1.0 + 0.75 * 2.0)).abs() < 1e-15);
        assert!((var[1] - (0.25 * 0.25 + 0.75 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn kl_of_identical_components_is_zero() {
        let q = g(&[0.5, -1.0], &[2.0, 0.5]);
        let mix = set(vec![(0.4, q.clone()), (0.6, q.clone())]);
        let kl = kl_mixture_to_gaussian(&mix, &q, 10_000, 1).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_prefers_moment_matched_candidate() {
        let mix = set(vec![(0.5, g(&[0.0], &[1.0])), (0.5, g(&[2.0], &[1.0]))]);
        let matched = collapse_aggregate(&mix, true);
        let sigma = 1.0 / matched.precision()[0].sqrt();
        let shifted = g(&[matched.mean()[0] + 0.5 * sigma], matched.precision());
        let base = kl_mixture_to_gaussian(&mix, &matched, 100_000, 7).unwrap();
        let worse = kl_mixture_to_gaussian(&mix, &shifted, 100_000, 7).unwrap();
        assert!(worse > base, "{worse} <= {base}");

        let sharp = g(matched.mean(), &[matched.precision()[0] * 10.0]);
        let sharper = kl_mixture_to_gaussian(&mix, &sharp, 100_000, 7).unwrap();
        assert!(sharper > base);
    }

    #[test]
    fn kl_difference_is_first_minus_second() {
        let mix = set(vec![(0.5, g(&[0.0], &[1.0])), (0.5, g(&[2.0], &[1.0]))]);
        let matched = collapse_aggregate(&mix, true);
        let far = g(&[5.0], matched.precision());
        let a = kl_mixture_to_gaussian(&mix, &far, 20_000, 3).unwrap();
        let b = kl_mixture_to_gaussian(&mix, &matched, 20_000, 3).unwrap();
        let diff = kl_difference(&mix, &far, &matched, 20_000, 3).unwrap();
        assert!(diff.mean > 0.0);
        assert!((diff.mean - (a - b)).abs() < 1e-9);
        assert!(diff.std_error > 0.0);

        let excess = kl_excess(&mix, &matched, std::slice::from_ref(&far), 20_000, 3).unwrap();
        assert!((excess[0].mean - diff.mean).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_zero_samples() {
        let q = g(&[0.0], &[1.0]);
        let mix = set(vec![(1.0, q.clone())]);
        assert!(kl_mixture_to_gaussian(&mix, &q, 0, 0).is_err());
    }

    fn diag_set(d: usize, n: usize) -> impl Strategy<Value = WeightedPosteriorSet> {
        (
            prop::collection::vec(0.05f64..1.0, n),
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n),
            prop::collection::vec(prop::collection::vec(0.1f64..10.0, d), n),
        )
            .prop_map(|(raw, means, precs)| {
                let total: f64 = raw.iter().sum();
                let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
                let head: f64 = weights[..weights.len() - 1].iter().sum();
                *weights.last_mut().unwrap() = 1.0 - head;
                WeightedPosteriorSet::new(
                    weights
                        .into_iter()
                        .zip(means.into_iter().zip(precs))
                        .map(|(w, (m, p))| (w, DiagGaussian::new(m, p).unwrap()))
                        .collect(),
                )
                .unwrap()
            })
    }

    fn any_diag_set() -> impl Strategy<Value = WeightedPosteriorSet> {
        (1usize..=5, 1usize..=4).prop_flat_map(|(d, n)| diag_set(d, n))
    }

    proptest! {
        #[test]
        fn product_mean_is_stationary_for_weighted_log_density(s in any_diag_set()) {
            let out = product_aggregate(&s).unwrap();
            // ∇ Σ πₙ ln qₙ = −Σ πₙ Pₙ (θ − μₙ)
            for j in 0..s.dim() {
                let grad: f64 = s.members().iter()
                    .map(|(w, g)| -w * g.precision()[j] * (out.mean()[j] - g.mean()[j]))
                    .sum();
                prop_assert!(grad.abs() < 1e-8);
            }
        }

        #[test]
        fn precision_scaling_leaves_mean_unchanged(s in any_diag_set(), c in 0.01f64..100.0) {
            let scaled = WeightedPosteriorSet::new(
                s.members().iter()
                    .map(|(w, g)| (*w, DiagGaussian::new(
                        g.mean().clone(),
                        g.precision().iter().map(|p| p * c).collect(),
                    ).unwrap()))
                    .collect(),
            ).unwrap();
            let a = product_aggregate(&s).unwrap();
            let b = product_aggregate(&scaled).unwrap();
            for j in 0..s.dim() {
                prop_assert!((a.mean()[j] - b.mean()[j]).abs() < 1e-12 * (1.0 + a.mean()[j].abs()));
                prop_assert!((b.precision()[j] - c * a.precision()[j]).abs() < 1e-12 * b.precision()[j]);
            }
        }

        #[test]
        fn equal_isotropic_precisions_reduce_to_averaging(s in any_diag_set(), p in 0.01f64..100.0) {
            let iso = WeightedPosteriorSet::new(
                s.members().iter()
                    .map(|(w, g)| (*w, DiagGaussian::isotropic(g.mean().clone(), p).unwrap()))
                    .collect(),
            ).unwrap();
            let product = product_aggregate(&iso).unwrap();
            let averaged = collapse_aggregate(&iso, false);
            for j in 0..s.dim() {
                prop_assert!((product.mean()[j] - averaged.mean()[j]).abs() < 1e-12);
            }
        }
    }
}
