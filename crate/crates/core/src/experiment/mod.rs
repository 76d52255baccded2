//! End-to-end experiments built on the runtime: single runs, grid sweeps,
//! first-round studies, the two-client Laplace ablation and centralized
//! training.

mod centralized;
mod config;
mod first_round;
mod ridge;
mod sweep;

pub use centralized::{train_centralized, CentralizedSpec};
pub use config::{parse_pairs, DataConfig, DatasetKind, ExperimentConfig, PenaltyKind, RidgeConfig};
pub use first_round::{first_round_csv, first_round_study, FirstRoundGrid, FirstRoundRow};
pub use ridge::{cosine_csv, ridge_ablation, rounds_csv, sweep_csv, write_ridge_outputs, RidgeReport, CURVES, ROUND_ARMS};
pub use sweep::{run_sweep, summary_csv, SweepCell, SweepSpec};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::{
    dirichlet_partition, load_idx, single_shard, synthetic_blobs, ClientShard, LabeledDataset,
    PartitionSpec,
};
use crate::error::{Error, Result};
use crate::nn::{init_params, MlpArchitecture};
use crate::posterior::{write_checkpoint, DiagGaussian};
use crate::runtime::{run_round, ClientState, LocalTraining, RoundEnv, RoundMetrics, ServerState};

/// Train and test split of the configured dataset.
pub fn load_data(cfg: &DataConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match cfg.dataset {
        DatasetKind::Mnist => {
            let (train, test) = load_mnist(&cfg.mnist_dir)?;
            let train = if cfg.train_size == 0 { train } else { train.head(cfg.train_size) };
            Ok((train, test.head(cfg.test_size)))
        }
        DatasetKind::Blobs => {
            let k = cfg.blob_classes;
            let all = synthetic_blobs(
                k,
                cfg.blob_per_class + cfg.blob_test_per_class,
                cfg.blob_dim,
                cfg.blob_spread,
                cfg.data_seed,
            );
            let cut = k * cfg.blob_per_class;
            let train: Vec<usize> = (0..cut).collect();
            let test: Vec<usize> = (cut..all.len()).collect();
            Ok((all.subset(&train), all.subset(&test)))
        }
    }
}

/// Reads the four standard MNIST IDX files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

pub fn architecture(cfg: &ExperimentConfig, input_dim: usize, classes: usize) -> Result<MlpArchitecture> {
    let mut sizes = vec![input_dim];
    sizes.extend(&cfg.hidden);
    sizes.push(classes);
    MlpArchitecture::new(sizes, cfg.activation)
}

pub fn partition(cfg: &ExperimentConfig, train: &LabeledDataset) -> Result<Vec<ClientShard>> {
    if cfg.clients == 1 {
        Ok(vec![single_shard(train)])
    } else {
        dirichlet_partition(
            train,
            &PartitionSpec {
                client_count: cfg.clients,
                alpha: cfg.alpha,
                seed: cfg.seed,
            },
        )
    }
}

pub fn metrics_header(clients: usize) -> String {
    let mut h = String::from("round,ga,la");
    for n in 0..clients {
        h.push_str(&format!(",client_{n}_acc"));
    }
    h.push_str(",wall_time_s\n");
    h
}

/// One CSV line; `wall_time_s` is 0 unless `record_time` is set.
pub fn metrics_row(m: &RoundMetrics, record_time: bool) -> String {
    let mut row = format!("{},{},{}", m.round, m.ga, m.la);
    for acc in &m.per_client_accuracy {
        row.push_str(&format!(",{acc}"));
    }
    let t = if record_time { m.wall_time } else { 0.0 };
    row.push_str(&format!(",{t}\n"));
    row
}

pub fn metrics_csv(metrics: &[RoundMetrics], clients: usize, record_time: bool) -> String {
    let mut out = metrics_header(clients);
    for m in metrics {
        out.push_str(&metrics_row(m, record_time));
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: Vec<RoundMetrics>,
    pub global: DiagGaussian,
}

impl RunResult {
    pub fn final_metrics(&self) -> &RoundMetrics {
        self.metrics.last().expect("at least one round")
    }
}

/// Hooks called while a run progresses.
pub trait RunObserver {
    fn round_finished(&mut self, _metrics: &RoundMetrics, _server: &ServerState) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

/// Runs `cfg.rounds` rounds on already-loaded data.
pub fn run_with_data(
    cfg: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    observer: &mut dyn RunObserver,
) -> Result<RunResult> {
    cfg.validate()?;
    let arch = architecture(cfg, train.dim(), train.class_count().max(test.class_count()))?;
    let shards = partition(cfg, train)?;
    let d = arch.param_count();
    let mut clients: Vec<ClientState> = shards
        .into_iter()
        .enumerate()
        .map(|(i, s)| ClientState::new(i, s, d))
        .collect();
    let mut server = ServerState::new(init_params(&arch, cfg.seed), cfg.gamma, cfg.strategy)?;
    let training = LocalTraining {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        penalty: cfg.local_penalty(),
        fisher_mode: cfg.fisher_mode,
        scaling: cfg.scaling,
        strategy: cfg.strategy,
    };
    let env = RoundEnv {
        arch: &arch,
        train,
        test,
        training: &training,
        seed: cfg.seed,
        pool: None,
    };
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let outcome = run_round(&env, &mut server, &mut clients)?;
        observer.round_finished(&outcome.metrics, &server)?;
        metrics.push(outcome.metrics);
    }
    Ok(RunResult {
        metrics,
        global: server.global,
    })
}

/// Streams each round to `metrics.csv` and refreshes `posterior_final.bin`.
struct OutputWriter {
    csv: BufWriter<File>,
    csv_path: PathBuf,
    checkpoint: PathBuf,
    record_time: bool,
}

impl RunObserver for OutputWriter {
    fn round_finished(&mut self, metrics: &RoundMetrics, server: &ServerState) -> Result<()> {
        self.csv
            .write_all(metrics_row(metrics, self.record_time).as_bytes())
            .and_then(|_| self.csv.flush())
            .map_err(|e| Error::io(&self.csv_path, e))?;
        write_checkpoint(&self.checkpoint, &server.global)
    }
}

/// Loads data, runs the experiment and writes `metrics.csv`,
/// `posterior_final.bin` and `config_resolved.txt` under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let (train, test) = load_data(&cfg.data)?;
    let dir = cfg.output_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let resolved = dir.join("config_resolved.txt");
    std::fs::write(&resolved, cfg.resolved().serialize()).map_err(|e| Error::io(&resolved, e))?;

    let csv_path = dir.join("metrics.csv");
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut writer = OutputWriter {
        csv: BufWriter::new(file),
        csv_path: csv_path.clone(),
        checkpoint: dir.join("posterior_final.bin"),
        record_time: cfg.record_time,
    };
    writer
        .csv
        .write_all(metrics_header(cfg.clients).as_bytes())
        .map_err(|e| Error::io(&csv_path, e))?;
    run_with_data(cfg, &train, &test, &mut writer)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn blob_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in [
            ("dataset", "blobs"),
            ("blob_classes", "4"),
            ("blob_per_class", "40"),
            ("blob_test_per_class", "20"),
            ("blob_dim", "5"),
            ("hidden", "8"),
            ("clients", "2"),
            ("alpha", "1"),
            ("rounds", "1"),
            ("epochs", "1"),
            ("batch_size", "16"),
            ("lr", "0.1"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn one_round_writes_one_row() {
        let dir = tempfile::tempdir().unwrap();
        for strategy in ["fedavg", "fola", "offline"] {
            let mut cfg = blob_config();
            cfg.set("strategy", strategy).unwrap();
            cfg.output_dir = dir.path().join(strategy);
            run_experiment(&cfg).unwrap();
            let csv = std::fs::read_to_string(cfg.output_dir.join("metrics.csv")).unwrap();
            let lines: Vec<&str> = csv.lines().collect();
            assert_eq!(lines[0], "round,ga,la,client_0_acc,client_1_acc,wall_time_s");
            assert_eq!(lines.len(), 2);
            assert!(lines[1].starts_with("1,"));
            assert!(lines[1].ends_with(",0"));
            assert!(!csv.contains('\r'));
            assert!(cfg.output_dir.join("posterior_final.bin").exists());
            let resolved = std::fs::read_to_string(cfg.output_dir.join("config_resolved.txt")).unwrap();
            assert!(!resolved.contains("penalty=auto"));
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blob_config();
        cfg.rounds = 3;
        let mut read = |name: &str| {
            cfg.output_dir = dir.path().join(name);
            run_experiment(&cfg).unwrap();
            (
                std::fs::read(cfg.output_dir.join("metrics.csv")).unwrap(),
                std::fs::read(cfg.output_dir.join("posterior_final.bin")).unwrap(),
            )
        };
        assert_eq!(read("a"), read("b"));
    }

    #[test]
    fn checkpoint_matches_the_returned_posterior() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blob_config();
        cfg.output_dir = dir.path().to_path_buf();
        let result = run_experiment(&cfg).unwrap();
        let saved = crate::posterior::read_checkpoint(dir.path().join("posterior_final.bin")).unwrap();
        assert_eq!(saved, result.global);
    }

    #[test]
    fn missing_mnist_reports_the_path() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.mnist_dir = "/nonexistent/mnist".into();
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/mnist"), "{err}");
    }

    #[test]
    fn single_client_uses_the_whole_set() {
        let mut cfg = blob_config();
        cfg.clients = 1;
        let (train, test) = load_data(&cfg.data).unwrap();
        let result = run_with_data(&cfg, &train, &test, &mut ()).unwrap();
        let m = result.final_metrics();
        assert_eq!(m.per_client_accuracy.len(), 1);
        assert_eq!(m.la, m.per_client_accuracy[0]);
    }
}
