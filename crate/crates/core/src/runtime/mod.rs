//! The federated protocol: client updates with a prior penalty and online
//! Fisher accumulation, server aggregation, and accuracy metrics.

mod client;
mod round;
mod server;

pub use client::{client_update, offline_fisher, ClientReport, ClientState, LocalTraining};
pub use round::{run_round, RoundEnv, RoundOutcome};
pub use server::{server_aggregate, LocalPosterior, ServerState};

use std::fmt;
use std::str::FromStr;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{predict, GradRecord, MlpArchitecture, ParamVector};
use crate::posterior::DiagGaussian;

/// How the server turns local posteriors into the next global posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregationStrategy {
    /// Weighted mean of the local means; the global precision stays `γ·1`.
    FedAvg,
    /// Product of local Gaussians whose precisions come from online Fisher
    /// accumulation with round scaling.
    #[default]
    GaussianProduct,
    /// Product of local Gaussians whose precisions are the Fisher evaluated
    /// once at the end of local training, plus `γ`.
    GaussianProductOffline,
}

impl FromStr for AggregationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Self::FedAvg),
            "fola" | "product" => Ok(Self::GaussianProduct),
            "offline" | "product-offline" => Ok(Self::GaussianProductOffline),
            other => Err(Error::InvalidInput(format!("unknown strategy `{other}`"))),
        }
    }
}

impl fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FedAvg => "fedavg",
            Self::GaussianProduct => "fola",
            Self::GaussianProductOffline => "offline",
        })
    }
}

/// Regulariser added to the task loss during local training. The weight `λ`
/// multiplies the penalty gradient.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LocalPenalty {
    #[default]
    None,
    /// `λ/2 ‖θ − μ_S‖²`
    Isotropic(f64),
    /// `λ/2 (θ − μ_S)ᵀ diag(F_off) (θ − μ_S)` with the server's aggregate of
    /// end-of-round Fisher diagonals.
    AnisotropicOffline(f64),
    /// `λ/2 (θ − μ_S)ᵀ Σ_S⁻¹ (θ − μ_S)`
    PriorLoss(f64),
}

impl LocalPenalty {
    pub fn lambda(&self) -> f64 {
        match *self {
            LocalPenalty::None => 0.0,
            LocalPenalty::Isotropic(l)
            | LocalPenalty::AnisotropicOffline(l)
            | LocalPenalty::PriorLoss(l) => l,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LocalPenalty::None => "none",
            LocalPenalty::Isotropic(_) => "isotropic",
            LocalPenalty::AnisotropicOffline(_) => "anisotropic",
            LocalPenalty::PriorLoss(_) => "prior",
        }
    }

    pub fn from_kind(kind: &str, lambda: f64) -> Result<Self> {
        match kind {
            "none" => Ok(LocalPenalty::None),
            "isotropic" | "fedprox" => Ok(LocalPenalty::Isotropic(lambda)),
            "anisotropic" | "fedcurv" => Ok(LocalPenalty::AnisotropicOffline(lambda)),
            "prior" => Ok(LocalPenalty::PriorLoss(lambda)),
            other => Err(Error::InvalidInput(format!("unknown penalty `{other}`"))),
        }
    }
}

/// How squared gradients are accumulated during local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FisherMode {
    /// Square of each minibatch-mean gradient.
    #[default]
    MinibatchMean,
    /// Mean of the squared per-sample gradients of each minibatch.
    PerSample,
}

/// How the inherited global precision is blended with a round's Fisher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoundScaling {
    /// `(1/r)F̄ + ((r−1)/r)(Σ_S⁻¹ − γ) + γ`: only the data-derived part of the
    /// prior is rescaled, so the initial `γ·1` prior is kept once.
    #[default]
    Anchored,
    /// `(1/r)F̄ + ((r−1)/r)Σ_S⁻¹`
    Literal,
}

/// Running sum of squared gradients over optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherAccumulator {
    sum_sq: Vec<f64>,
    steps: usize,
    samples_seen: usize,
}

impl FisherAccumulator {
    pub fn new(dim: usize) -> Self {
        FisherAccumulator {
            sum_sq: vec![0.0; dim],
            steps: 0,
            samples_seen: 0,
        }
    }

    pub fn reset(&mut self) {
        self.sum_sq.iter_mut().for_each(|v| *v = 0.0);
        self.steps = 0;
        self.samples_seen = 0;
    }

    /// Adds `g ⊙ g` for one minibatch step.
    pub fn record(&mut self, record: &GradRecord) {
        self.record_squared(record.grad.iter().map(|g| g * g), record.batch_size);
    }

    /// Adds one step's already-squared contribution.
    pub fn record_squared(&mut self, squared: impl IntoIterator<Item = f64>, batch_size: usize) {
        for (acc, sq) in self.sum_sq.iter_mut().zip(squared) {
            *acc += sq;
        }
        self.steps += 1;
        self.samples_seen += batch_size;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    pub fn sum_sq(&self) -> &[f64] {
        &self.sum_sq
    }

    /// `sum_sq / steps`, or `None` before the first step.
    pub fn mean(&self) -> Option<Vec<f64>> {
        (self.steps > 0).then(|| {
            let t = self.steps as f64;
            self.sum_sq.iter().map(|s| s / t).collect()
        })
    }
}

/// Per-round accuracy summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    /// Test accuracy of the global mean.
    pub ga: f64,
    /// `Σ πₙ · accuracy(μₙ)` on the same test set.
    pub la: f64,
    pub per_client_accuracy: Vec<f64>,
    pub wall_time: f64,
}

/// `λ/2`-free prior loss `½(θ − μ)ᵀ diag(P)(θ − μ)` and its gradient `P ⊙ (θ − μ)`.
pub fn prior_loss_and_grad(theta: &[f64], prior: &DiagGaussian) -> Result<(f64, ParamVector)> {
    if theta.len() != prior.dim() {
        return Err(Error::InvalidInput(format!(
            "parameter length {} does not match prior dimension {}",
            theta.len(),
            prior.dim()
        )));
    }
    let mut loss = 0.0;
    let grad: Vec<f64> = theta
        .iter()
        .zip(prior.mean().iter())
        .zip(prior.precision())
        .map(|((t, m), p)| {
            let diff = t - m;
            loss += p * diff * diff;
            p * diff
        })
        .collect();
    Ok((0.5 * loss, grad.into()))
}

const EVAL_CHUNK: usize = 2048;

/// Fraction of `test` whose argmax prediction matches the label.
pub fn evaluate(arch: &MlpArchitecture, theta: &[f64], test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < test.len() {
        let end = (start + EVAL_CHUNK).min(test.len());
        let x = test.inputs().slice_move(ndarray::s![start..end, ..]);
        let predicted = predict(arch, theta, x)?;
        correct += predicted
            .iter()
            .zip(&test.labels()[start..end])
            .filter(|(p, y)| p == y)
            .count();
        start = end;
    }
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::nn::{init_params, sgd_step_in_place, task_loss_and_grad};
    use ndarray::Array2;

    #[test]
    fn prior_loss_cases() {
        let prior = DiagGaussian::new(vec![1.0, -2.0], vec![2.0, 0.5]).unwrap();
        let (loss, grad) = prior_loss_and_grad(&[1.0, -2.0], &prior).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));

        let one = DiagGaussian::new(vec![1.0], vec![2.0]).unwrap();
        let (loss, grad) = prior_loss_and_grad(&[3.0], &one).unwrap();
        assert_eq!(loss, 4.0);
        assert_eq!(grad[0], 4.0);

        let unit = DiagGaussian::isotropic(vec![0.5, 0.5, 0.5], 1.0).unwrap();
        let theta = [1.0, -1.0, 2.5];
        let (loss, grad) = prior_loss_and_grad(&theta, &unit).unwrap();
        let prox: f64 = theta.iter().map(|t| (t - 0.5) * (t - 0.5)).sum::<f64>() / 2.0;
        assert!((loss - prox).abs() < 1e-15);
        for (g, t) in grad.iter().zip(theta) {
            assert_eq!(*g, t - 0.5);
        }
        assert!(prior_loss_and_grad(&[0.0], &unit).is_err());
    }

    #[test]
    fn accumulator_averages_over_steps() {
        let mut acc = FisherAccumulator::new(2);
        assert!(acc.mean().is_none());
        acc.record(&GradRecord { grad: vec![1.0, -2.0].into(), step_index: 1, batch_size: 4 });
        acc.record(&GradRecord { grad: vec![3.0, 0.0].into(), step_index: 2, batch_size: 4 });
        assert_eq!(acc.steps(), 2);
        assert_eq!(acc.samples_seen(), 8);
        assert_eq!(acc.mean().unwrap(), vec![5.0, 2.0]);
        acc.reset();
        assert_eq!(acc.steps(), 0);
    }

    #[test]
    fn zero_model_on_balanced_set_predicts_class_zero() {
        let test = synthetic_blobs(4, 5, 3, 1.0, 0);
        let arch = MlpArchitecture::new(vec![3, 6, 4], Default::default()).unwrap();
        let acc = evaluate(&arch, &vec![0.0; arch.param_count()], &test).unwrap();
        assert!((acc - 0.25).abs() < 1e-15);
    }

    #[test]
    fn memorised_training_set_scores_perfectly() {
        let train = synthetic_blobs(4, 5, 8, 3.0, 2);
        let arch = MlpArchitecture::new(vec![8, 32, 4], Default::default()).unwrap();
        let mut theta = init_params(&arch, 1);
        for _ in 0..3000 {
            let (_, g) = task_loss_and_grad(&arch, &theta, train.inputs(), train.labels()).unwrap();
            sgd_step_in_place(&mut theta, &g, 0.2).unwrap();
        }
        assert_eq!(evaluate(&arch, &theta, &train).unwrap(), 1.0);
    }

    #[test]
    fn empty_test_set_is_rejected() {
        let arch = MlpArchitecture::softmax_regression(1, 2).unwrap();
        let empty = LabeledDataset::new(Array2::zeros((0, 1)), vec![], 2).unwrap();
        assert!(evaluate(&arch, &[0.0; 4], &empty).is_err());
    }

    #[test]
    fn names_parse() {
        for s in ["fedavg", "fola", "offline"] {
            assert_eq!(s.parse::<AggregationStrategy>().unwrap().to_string(), s);
        }
        for kind in ["none", "isotropic", "anisotropic", "prior"] {
            assert_eq!(LocalPenalty::from_kind(kind, 2.0).unwrap().kind(), kind);
        }
        assert!(LocalPenalty::from_kind("l1", 1.0).is_err());
    }
}
