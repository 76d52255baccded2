//! Topography of two-component Gaussian mixtures.
//!
//! Every critical point of `p₁(θ) + p₂(θ)` lies on the ridge line
//! `θ(α) = (αP₁ + (1−α)P₂)⁻¹ (αP₁μ₁ + (1−α)P₂μ₂)`, at the `α` equal to the
//! responsibility `p₁/(p₁+p₂)` of the first component at that point.

use super::{fuse_diag, DenseGaussian, DiagGaussian, WeightedPosteriorSet};
use crate::error::{Error, Result};
use crate::nn::ParamVector;

/// Gaussians that can be fused by precision weighting.
pub trait RidgeGaussian: Sized {
    fn dim(&self) -> usize;
    fn log_density(&self, theta: &[f64]) -> f64;
    /// Mean of the normalised product `Π gᵢ^wᵢ`.
    fn fused_mean(members: &[(f64, &Self)]) -> Result<ParamVector>;
}

impl RidgeGaussian for DiagGaussian {
    fn dim(&self) -> usize {
        DiagGaussian::dim(self)
    }

    fn log_density(&self, theta: &[f64]) -> f64 {
        DiagGaussian::log_density(self, theta)
    }

    fn fused_mean(members: &[(f64, &Self)]) -> Result<ParamVector> {
        let d = members[0].1.dim();
        Ok(fuse_diag(members.iter().copied(), d)?.into_parts().0)
    }
}

impl RidgeGaussian for DenseGaussian {
    fn dim(&self) -> usize {
        DenseGaussian::dim(self)
    }

    fn log_density(&self, theta: &[f64]) -> f64 {
        DenseGaussian::log_density(self, theta)
    }

    fn fused_mean(members: &[(f64, &Self)]) -> Result<ParamVector> {
        Ok(super::dense::fuse_dense(members)?.mean().as_slice().to_vec().into())
    }
}

/// Point on the ridge line at weight `alpha1` for the first component.
pub fn ridge_line<G: RidgeGaussian>(g1: &G, g2: &G, alpha1: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&alpha1) {
        return Err(Error::InvalidInput(format!("alpha1 = {alpha1} outside [0, 1]")));
    }
    if g1.dim() != g2.dim() {
        return Err(Error::InvalidInput("components differ in dimension".into()));
    }
    G::fused_mean(&[(alpha1, g1), (1.0 - alpha1, g2)])
}

/// `p₁(θ) / (p₁(θ) + p₂(θ))`, evaluated in log space.
pub fn responsibility_alpha<G: RidgeGaussian>(g1: &G, g2: &G, theta: &[f64]) -> Result<f64> {
    let l1 = g1.log_density(theta);
    let l2 = g2.log_density(theta);
    if l1.is_nan() || l2.is_nan() || (l1 == f64::NEG_INFINITY && l2 == f64::NEG_INFINITY) {
        return Err(Error::UndefinedResponsibility);
    }
    Ok(1.0 / (1.0 + (l2 - l1).exp()))
}

/// Exact gradient of the mixture density `Σ πₙ N(θ | μₙ, Σₙ)`.
pub fn mixture_density_grad(set: &WeightedPosteriorSet, theta: &[f64]) -> Result<Vec<f64>> {
    if theta.len() != set.dim() {
        return Err(Error::InvalidInput(format!(
            "point has dimension {}, mixture has {}",
            theta.len(),
            set.dim()
        )));
    }
    let mut grad = vec![0.0; theta.len()];
    for (w, g) in set.members() {
        let density = w * g.log_density(theta).exp();
        if density == 0.0 {
            continue;
        }
        for (j, out) in grad.iter_mut().enumerate() {
            *out -= density * g.precision()[j] * (theta[j] - g.mean()[j]);
        }
    }
    Ok(grad)
}
