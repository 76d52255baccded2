//! Two clients with disjoint classes on a softmax-regression model: round-1
//! aggregation curves over `π₁` for several curvature estimates, plus a
//! multi-round comparison of online and offline diagonal Fisher.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{load_data, load_mnist, DatasetKind, RidgeConfig};
use crate::data::{single_shard, ClientShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{init_params, task_loss_and_grad, MlpArchitecture, ParamVector};
use crate::posterior::{efull_from_dense, full_hessian_softmax, ridge_line, DenseGaussian, DiagGaussian};
use crate::runtime::{
    evaluate, offline_fisher, run_round, AggregationStrategy, ClientState, FisherAccumulator,
    FisherMode, LocalPenalty, LocalTraining, RoundEnv, RoundScaling, ServerState,
};
use crate::seed::mix;

pub const CURVES: [&str; 7] = [
    "fedavg",
    "full_offline",
    "full_online",
    "efull_offline",
    "efull_online",
    "diag_offline",
    "diag_online",
];

pub const ROUND_ARMS: [&str; 3] = ["fedavg", "diag_offline", "diag_online"];

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeReport {
    pub pi_grid: Vec<f64>,
    /// Test accuracy along the `π₁` grid, one entry per name in [`CURVES`].
    pub curves: Vec<(String, Vec<f64>)>,
    /// Test accuracy per round at the configured `π₁`, one entry per name in
    /// [`ROUND_ARMS`].
    pub rounds: Vec<(String, Vec<f64>)>,
    /// Cosine similarity of the two clients' precisions per curvature estimate.
    pub cosine: Vec<(String, f64)>,
    /// Epochs each client needed to reach its optimum.
    pub epochs_trained: [usize; 2],
}

impl RidgeReport {
    pub fn curve(&self, name: &str) -> Option<&[f64]> {
        self.curves.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn trace(&self, name: &str) -> Option<&[f64]> {
        self.rounds.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

struct Split {
    train: LabeledDataset,
    test: LabeledDataset,
    shards: [ClientShard; 2],
}

fn prepare(cfg: &RidgeConfig) -> Result<Split> {
    let (train, test) = match cfg.data.dataset {
        DatasetKind::Mnist => {
            let (train, test) = load_mnist(&cfg.data.mnist_dir)?;
            (
                train.downsample_square(cfg.crop, cfg.pool)?,
                test.head(cfg.data.test_size).downsample_square(cfg.crop, cfg.pool)?,
            )
        }
        DatasetKind::Blobs => load_data(&cfg.data)?,
    };
    let k = train.class_count();
    if k < 2 {
        return Err(Error::InvalidInput("need at least two classes".into()));
    }
    let half = k / 2;
    let pick = |first: bool| -> Vec<usize> {
        train
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &y)| (y < half) == first)
            .map(|(i, _)| i)
            .take(cfg.samples_per_client)
            .collect()
    };
    let (a, b) = (pick(true), pick(false));
    let (na, nb) = (a.len(), b.len());
    let merged: Vec<usize> = a.into_iter().chain(b).collect();
    let train = train.subset(&merged);
    Ok(Split {
        train,
        test,
        shards: [
            ClientShard { indices: (0..na).collect(), weight: cfg.pi1 },
            ClientShard { indices: (na..na + nb).collect(), weight: 1.0 - cfg.pi1 },
        ],
    })
}

struct LocalOptimum {
    theta: ParamVector,
    online_fisher: Vec<f64>,
    online_hessian: DMatrix<f64>,
    epochs: usize,
}

/// SGD on the task loss plus the `γ` prior around `theta0` until the
/// full-batch gradient norm drops below `grad_tol` or `max_epochs` run out.
/// Squared minibatch gradients are accumulated along the way, and the Hessian
/// is averaged over snapshots taken after epochs 1, 2, 4, 8, … and at the end.
fn train_to_optimum(
    arch: &MlpArchitecture,
    data: &LabeledDataset,
    theta0: &ParamVector,
    cfg: &RidgeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LocalOptimum> {
    let d = arch.param_count();
    let mut theta = theta0.clone();
    let mut acc = FisherAccumulator::new(d);
    let mut hessian_sum = DMatrix::zeros(d, d);
    let mut snapshots = 0usize;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = 0;
    let mut last_snapshot = 0;
    let prior_grad = |theta: &[f64], g: &mut [f64]| {
        for ((gi, t), t0) in g.iter_mut().zip(theta).zip(theta0.iter()) {
            *gi += cfg.gamma * (t - t0);
        }
    };
    loop {
        let (_, mut full) = task_loss_and_grad(arch, &theta, data.inputs(), data.labels())?;
        prior_grad(&theta, &mut full);
        if full.norm() < cfg.grad_tol || epochs >= cfg.max_epochs {
            break;
        }
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = data.gather(batch);
            let (_, mut g) = task_loss_and_grad(arch, &theta, x.view(), &y)?;
            acc.record_squared(g.iter().map(|v| v * v), batch.len());
            prior_grad(&theta, &mut g);
            for (t, gi) in theta.iter_mut().zip(g.iter()) {
                *t -= cfg.lr * gi;
            }
        }
        epochs += 1;
        if !theta.is_finite() {
            return Err(Error::Numeric(format!("training diverged after {epochs} epochs")));
        }
        if epochs.is_power_of_two() {
            hessian_sum += full_hessian_softmax(arch, &theta, data.inputs(), cfg.dense_cap)?;
            snapshots += 1;
            last_snapshot = epochs;
        }
    }
    if last_snapshot != epochs || snapshots == 0 {
        hessian_sum += full_hessian_softmax(arch, &theta, data.inputs(), cfg.dense_cap)?;
        snapshots += 1;
    }
    let online_fisher = acc.mean().unwrap_or_else(|| vec![0.0; d]);
    Ok(LocalOptimum {
        theta,
        online_fisher,
        online_hessian: hessian_sum / snapshots as f64,
        epochs,
    })
}

fn with_prior(h: DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let d = h.nrows();
    h + DMatrix::identity(d, d) * gamma
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

struct ClientCurvature {
    mean: ParamVector,
    diag_offline: DiagGaussian,
    diag_online: DiagGaussian,
    full_offline: DenseGaussian,
    full_online: DenseGaussian,
    efull_offline: DiagGaussian,
    efull_online: DiagGaussian,
}

fn curvature(arch: &MlpArchitecture, data: &LabeledDataset, opt: LocalOptimum, cfg: &RidgeConfig) -> Result<ClientCurvature> {
    let gamma = cfg.gamma;
    let shard = single_shard(data);
    let off = offline_fisher(arch, &opt.theta, data, &shard, cfg.batch_size)?;
    let diag = |f: &[f64]| DiagGaussian::new(opt.theta.clone(), f.iter().map(|v| v + gamma).collect());
    let mean = DVector::from_column_slice(&opt.theta);
    let full_offline = DenseGaussian::new(
        mean.clone(),
        with_prior(full_hessian_softmax(arch, &opt.theta, data.inputs(), cfg.dense_cap)?, gamma),
    )?;
    let full_online = DenseGaussian::new(mean, with_prior(opt.online_hessian, gamma))?;
    Ok(ClientCurvature {
        diag_offline: diag(&off)?,
        diag_online: diag(&opt.online_fisher)?,
        efull_offline: efull_from_dense(&full_offline)?,
        efull_online: efull_from_dense(&full_online)?,
        full_offline,
        full_online,
        mean: opt.theta,
    })
}

fn round_trace(
    arch: &MlpArchitecture,
    split: &Split,
    cfg: &RidgeConfig,
    strategy: AggregationStrategy,
) -> Result<Vec<f64>> {
    let d = arch.param_count();
    let mut clients: Vec<ClientState> = split
        .shards
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, s)| ClientState::new(i, s, d))
        .collect();
    let mut server = ServerState::new(init_params(arch, cfg.seed), cfg.gamma, strategy)?;
    let training = LocalTraining {
        epochs: cfg.round_epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        penalty: match strategy {
            AggregationStrategy::FedAvg => LocalPenalty::None,
            _ => LocalPenalty::PriorLoss(cfg.lambda),
        },
        fisher_mode: FisherMode::MinibatchMean,
        scaling: RoundScaling::Anchored,
        strategy,
    };
    let env = RoundEnv {
        arch,
        train: &split.train,
        test: &split.test,
        training: &training,
        seed: cfg.seed,
        pool: None,
    };
    (0..cfg.rounds)
        .map(|_| run_round(&env, &mut server, &mut clients).map(|o| o.metrics.ga))
        .collect()
}

pub fn ridge_ablation(cfg: &RidgeConfig) -> Result<RidgeReport> {
    let mut problems = Vec::new();
    cfg.problems(&mut problems);
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let split = prepare(cfg)?;
    let arch = MlpArchitecture::softmax_regression(split.train.dim(), split.train.class_count())?;
    if arch.param_count() > cfg.dense_cap {
        return Err(Error::TooLarge { dim: arch.param_count(), cap: cfg.dense_cap });
    }
    let theta0 = init_params(&arch, cfg.seed);

    let mut clients = Vec::with_capacity(2);
    let mut epochs_trained = [0; 2];
    for (n, shard) in split.shards.iter().enumerate() {
        let data = split.train.subset(&shard.indices);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, n as u64, 0]));
        let opt = train_to_optimum(&arch, &data, &theta0, cfg, &mut rng)?;
        epochs_trained[n] = opt.epochs;
        clients.push(curvature(&arch, &data, opt, cfg)?);
    }
    let (c1, c2) = (&clients[0], &clients[1]);

    let g = cfg.grid_points;
    let pi_grid: Vec<f64> = (0..g).map(|i| i as f64 / (g - 1) as f64).collect();
    let mut curves: Vec<(String, Vec<f64>)> = CURVES.iter().map(|n| (n.to_string(), Vec::new())).collect();
    for &pi in &pi_grid {
        let fedavg: Vec<f64> = c1.mean.iter().zip(c2.mean.iter()).map(|(a, b)| pi * a + (1.0 - pi) * b).collect();
        let points = [
            ParamVector::from(fedavg),
            ridge_line(&c1.full_offline, &c2.full_offline, pi)?,
            ridge_line(&c1.full_online, &c2.full_online, pi)?,
            ridge_line(&c1.efull_offline, &c2.efull_offline, pi)?,
            ridge_line(&c1.efull_online, &c2.efull_online, pi)?,
            ridge_line(&c1.diag_offline, &c2.diag_offline, pi)?,
            ridge_line(&c1.diag_online, &c2.diag_online, pi)?,
        ];
        for ((_, curve), theta) in curves.iter_mut().zip(&points) {
            curve.push(evaluate(&arch, theta, &split.test)?);
        }
    }

    let cosine = vec![
        ("full_offline".to_string(), cosine(c1.full_offline.precision().as_slice(), c2.full_offline.precision().as_slice())),
        ("full_online".to_string(), cosine(c1.full_online.precision().as_slice(), c2.full_online.precision().as_slice())),
        ("efull_offline".to_string(), cosine(c1.efull_offline.precision(), c2.efull_offline.precision())),
        ("efull_online".to_string(), cosine(c1.efull_online.precision(), c2.efull_online.precision())),
        ("diag_offline".to_string(), cosine(c1.diag_offline.precision(), c2.diag_offline.precision())),
        ("diag_online".to_string(), cosine(c1.diag_online.precision(), c2.diag_online.precision())),
    ];

    let strategies = [
        AggregationStrategy::FedAvg,
        AggregationStrategy::GaussianProductOffline,
        AggregationStrategy::GaussianProduct,
    ];
    let rounds = ROUND_ARMS
        .iter()
        .zip(strategies)
        .map(|(name, s)| Ok((name.to_string(), round_trace(&arch, &split, cfg, s)?)))
        .collect::<Result<Vec<_>>>()?;

    Ok(RidgeReport { pi_grid, curves, rounds, cosine, epochs_trained })
}

pub fn sweep_csv(report: &RidgeReport) -> String {
    let mut out = String::from("pi1");
    for (name, _) in &report.curves {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, pi) in report.pi_grid.iter().enumerate() {
        out.push_str(&pi.to_string());
        for (_, curve) in &report.curves {
            out.push_str(&format!(",{}", curve[i]));
        }
        out.push('\n');
    }
    out
}

pub fn rounds_csv(report: &RidgeReport) -> String {
    let mut out = String::from("round");
    for (name, _) in &report.rounds {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let len = report.rounds.first().map_or(0, |(_, t)| t.len());
    for r in 0..len {
        out.push_str(&(r + 1).to_string());
        for (_, trace) in &report.rounds {
            out.push_str(&format!(",{}", trace[r]));
        }
        out.push('\n');
    }
    out
}

pub fn cosine_csv(report: &RidgeReport) -> String {
    let mut out = String::from("approximation,style,cosine\n");
    for (name, value) in &report.cosine {
        let (approx, style) = name.split_once('_').expect("names are approx_style");
        out.push_str(&format!("{approx},{style},{value}\n"));
    }
    out
}

/// Writes `ridge_sweep.csv`, `ridge_rounds.csv`, `ridge_cosine.csv` and
/// `config_resolved.txt` under `dir`.
pub fn write_ridge_outputs(dir: &Path, cfg: &RidgeConfig, report: &RidgeReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [
        ("ridge_sweep.csv", sweep_csv(report)),
        ("ridge_rounds.csv", rounds_csv(report)),
        ("ridge_cosine.csv", cosine_csv(report)),
        ("config_resolved.txt", cfg.serialize()),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
