use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{AggregationStrategy, FisherAccumulator, FisherMode, LocalPenalty, RoundScaling};
use crate::data::{ClientShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{sgd_step_in_place, task_loss_and_grad, GradRecord, MlpArchitecture, ParamVector};
use crate::posterior::DiagGaussian;

/// Local optimisation settings shared by every client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    /// `0` leaves the parameters in place (useful for evaluating Fisher terms).
    pub lr: f64,
    pub penalty: LocalPenalty,
    pub fisher_mode: FisherMode,
    pub scaling: RoundScaling,
    /// Decides how the reported precision is formed.
    pub strategy: AggregationStrategy,
}

impl LocalTraining {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate {} is invalid", self.lr)));
        }
        if !(self.penalty.lambda() >= 0.0) {
            return Err(Error::InvalidInput("penalty weight must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub shard: ClientShard,
    /// Round of the most recent update (0 before the first).
    pub round: usize,
    pub accumulator: FisherAccumulator,
    pub local_posterior: Option<DiagGaussian>,
}

impl ClientState {
    pub fn new(id: usize, shard: ClientShard, dim: usize) -> Self {
        ClientState {
            id,
            shard,
            round: 0,
            accumulator: FisherAccumulator::new(dim),
            local_posterior: None,
        }
    }
}

/// What a client sends back after one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client: usize,
    pub weight: f64,
    /// `(μₙ, Σₙ⁻¹)`
    pub posterior: DiagGaussian,
    /// Step-averaged squared gradients `F̄ₙ` of this round (zeros without steps).
    pub fisher: Vec<f64>,
    pub steps: usize,
    /// Set when no optimizer step ran, so `F̄ₙ` is undefined.
    pub degenerate: bool,
    /// End-of-round Fisher diagonal, when the strategy or penalty needs it.
    pub offline_fisher: Option<Vec<f64>>,
}

fn penalty_grad(
    penalty: LocalPenalty,
    theta: &[f64],
    global: &DiagGaussian,
    curvature: Option<&[f64]>,
    out: &mut [f64],
) {
    let mean = global.mean();
    match penalty {
        LocalPenalty::None => {}
        LocalPenalty::Isotropic(lambda) => {
            for ((o, t), m) in out.iter_mut().zip(theta).zip(mean.iter()) {
                *o += lambda * (t - m);
            }
        }
        LocalPenalty::PriorLoss(lambda) => {
            for (((o, t), m), p) in out.iter_mut().zip(theta).zip(mean.iter()).zip(global.precision()) {
                *o += lambda * p * (t - m);
            }
        }
        LocalPenalty::AnisotropicOffline(lambda) => {
            if let Some(f) = curvature {
                for (((o, t), m), p) in out.iter_mut().zip(theta).zip(mean.iter()).zip(f) {
                    *o += lambda * p * (t - m);
                }
            }
        }
    }
}

fn per_sample_squares(
    arch: &MlpArchitecture,
    theta: &[f64],
    data: &LabeledDataset,
    batch: &[usize],
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; theta.len()];
    for &i in batch {
        let (x, y) = data.gather(&[i]);
        let (_, g) = task_loss_and_grad(arch, theta, x.view(), &y)?;
        for (a, v) in acc.iter_mut().zip(g.iter()) {
            *a += v * v;
        }
    }
    let n = batch.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Round-scaled blend of this round's Fisher with the inherited precision.
fn blend(fisher: &[f64], inherited: &[f64], round: usize, gamma: f64, scaling: RoundScaling) -> Vec<f64> {
    let r = round as f64;
    let new = 1.0 / r;
    let old = (r - 1.0) / r;
    fisher
        .iter()
        .zip(inherited)
        .map(|(&f, &p)| match scaling {
            RoundScaling::Literal => new * f + old * p,
            RoundScaling::Anchored => new * f + old * (p - gamma).max(0.0) + gamma,
        })
        .collect()
}

/// Trains one client for a round starting from the global mean and returns
/// its local posterior.
///
/// `curvature` is the server's aggregate offline Fisher used by
/// [`LocalPenalty::AnisotropicOffline`]. `gamma` is the initial prior precision.
#[allow(clippy::too_many_arguments)]
pub fn client_update(
    client: &mut ClientState,
    arch: &MlpArchitecture,
    data: &LabeledDataset,
    global: &DiagGaussian,
    curvature: Option<&[f64]>,
    round: usize,
    gamma: f64,
    cfg: &LocalTraining,
    rng: &mut ChaCha8Rng,
) -> Result<ClientReport> {
    cfg.validate()?;
    if round == 0 {
        return Err(Error::InvalidInput("rounds are numbered from 1".into()));
    }
    if client.shard.is_empty() {
        return Err(Error::InvalidInput(format!("client {} has no data", client.id)));
    }
    let d = arch.param_count();
    if global.dim() != d {
        return Err(Error::InvalidInput(format!(
            "global posterior has dimension {}, model has {d}",
            global.dim()
        )));
    }

    let mut theta: ParamVector = global.mean().clone();
    client.accumulator.reset();
    let mut order = client.shard.indices.clone();
    let mut step_dir = vec![0.0; d];
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let (x, y) = data.gather(batch);
            let (loss, grad) = task_loss_and_grad(arch, &theta, x.view(), &y)?;
            if !loss.is_finite() {
                return Err(Error::DivergedClient { client: client.id, round, step });
            }
            match cfg.fisher_mode {
                FisherMode::MinibatchMean => client.accumulator.record(&GradRecord {
                    grad: grad.clone(),
                    step_index: step,
                    batch_size: batch.len(),
                }),
                FisherMode::PerSample => client
                    .accumulator
                    .record_squared(per_sample_squares(arch, &theta, data, batch)?, batch.len()),
            }
            step_dir.copy_from_slice(&grad);
            penalty_grad(cfg.penalty, &theta, global, curvature, &mut step_dir);
            if cfg.lr > 0.0 {
                sgd_step_in_place(&mut theta, &step_dir, cfg.lr)
                    .map_err(|_| Error::DivergedClient { client: client.id, round, step })?;
                if !theta.is_finite() {
                    return Err(Error::DivergedClient { client: client.id, round, step });
                }
            }
        }
    }

    let degenerate = client.accumulator.steps() == 0;
    let fisher = client.accumulator.mean().unwrap_or_else(|| vec![0.0; d]);

    let needs_offline = matches!(cfg.strategy, AggregationStrategy::GaussianProductOffline)
        || matches!(cfg.penalty, LocalPenalty::AnisotropicOffline(_));
    let offline = if needs_offline {
        Some(offline_fisher(arch, &theta, data, &client.shard, cfg.batch_size)?)
    } else {
        None
    };

    let precision = match cfg.strategy {
        AggregationStrategy::FedAvg => vec![gamma; d],
        AggregationStrategy::GaussianProduct => {
            blend(&fisher, global.precision(), round, gamma, cfg.scaling)
        }
        AggregationStrategy::GaussianProductOffline => offline
            .as_ref()
            .expect("computed for this strategy")
            .iter()
            .map(|f| f + gamma)
            .collect(),
    };

    let posterior = DiagGaussian::new(theta, precision)?;
    client.round = round;
    client.local_posterior = Some(posterior.clone());
    Ok(ClientReport {
        client: client.id,
        weight: client.shard.weight,
        posterior,
        fisher,
        steps: client.accumulator.steps(),
        degenerate,
        offline_fisher: offline,
    })
}

/// Mean over sequential minibatches of the squared minibatch gradient at a
/// fixed `theta`.
pub fn offline_fisher(
    arch: &MlpArchitecture,
    theta: &[f64],
    data: &LabeledDataset,
    shard: &ClientShard,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if shard.is_empty() {
        return Err(Error::InvalidInput("empty shard".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let mut acc = FisherAccumulator::new(theta.len());
    for (i, batch) in shard.indices.chunks(batch_size).enumerate() {
        let (x, y) = data.gather(batch);
        let (_, grad) = task_loss_and_grad(arch, theta, x.view(), &y)?;
        acc.record(&GradRecord { grad, step_index: i + 1, batch_size: batch.len() });
    }
    Ok(acc.mean().expect("at least one batch"))
}
