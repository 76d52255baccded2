use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::runtime::{AggregationStrategy, FisherMode, LocalPenalty, RoundScaling};

/// Splits `key = value` lines. Blank lines and `#` comments are skipped and
/// dashes in keys are read as underscores.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut bad = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                pairs.push((k.trim().replace('-', "_"), v.trim().to_string()))
            }
            _ => bad.push(format!("line {}: expected key=value, got `{raw}`", n + 1)),
        }
    }
    if bad.is_empty() {
        Ok(pairs)
    } else {
        Err(Error::Config(bad))
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got `{value}`")),
    }
}

fn parse_layers(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join_layers(layers: &[usize]) -> String {
    if layers.is_empty() {
        return "none".into();
    }
    layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Blobs,
}

impl FromStr for DatasetKind {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "blobs" => Ok(DatasetKind::Blobs),
            _ => Err(()),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Blobs => "blobs",
        })
    }
}

/// Where the train and test sets come from.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub mnist_dir: PathBuf,
    /// Leading MNIST training samples to keep; 0 keeps all.
    pub train_size: usize,
    pub test_size: usize,
    pub blob_classes: usize,
    pub blob_per_class: usize,
    pub blob_test_per_class: usize,
    pub blob_dim: usize,
    pub blob_spread: f64,
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetKind::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            train_size: 10_000,
            test_size: 2_000,
            blob_classes: 10,
            blob_per_class: 100,
            blob_test_per_class: 50,
            blob_dim: 20,
            blob_spread: 1.0,
            data_seed: 0,
        }
    }
}

impl DataConfig {
    fn set(&mut self, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
        let r = match key {
            "dataset" => value
                .parse()
                .map(|v| self.dataset = v)
                .map_err(|_| format!("dataset: expected mnist or blobs, got `{value}`")),
            "mnist_dir" => {
                self.mnist_dir = PathBuf::from(value);
                Ok(())
            }
            "train_size" => parse(key, value).map(|v| self.train_size = v),
            "test_size" => parse(key, value).map(|v| self.test_size = v),
            "blob_classes" => parse(key, value).map(|v| self.blob_classes = v),
            "blob_per_class" => parse(key, value).map(|v| self.blob_per_class = v),
            "blob_test_per_class" => parse(key, value).map(|v| self.blob_test_per_class = v),
            "blob_dim" => parse(key, value).map(|v| self.blob_dim = v),
            "blob_spread" => parse(key, value).map(|v| self.blob_spread = v),
            "data_seed" => parse(key, value).map(|v| self.data_seed = v),
            _ => return None,
        };
        Some(r)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dataset", self.dataset.to_string()),
            ("mnist_dir", self.mnist_dir.display().to_string()),
            ("train_size", self.train_size.to_string()),
            ("test_size", self.test_size.to_string()),
            ("blob_classes", self.blob_classes.to_string()),
            ("blob_per_class", self.blob_per_class.to_string()),
            ("blob_test_per_class", self.blob_test_per_class.to_string()),
            ("blob_dim", self.blob_dim.to_string()),
            ("blob_spread", self.blob_spread.to_string()),
            ("data_seed", self.data_seed.to_string()),
        ]
    }

    fn problems(&self, out: &mut Vec<String>) {
        match self.dataset {
            DatasetKind::Mnist => {
                if self.test_size == 0 {
                    out.push("test_size: must be positive".into());
                }
            }
            DatasetKind::Blobs => {
                if self.blob_classes < 2 {
                    out.push("blob_classes: need at least 2".into());
                }
                if self.blob_per_class == 0 {
                    out.push("blob_per_class: must be positive".into());
                }
                if self.blob_test_per_class == 0 {
                    out.push("blob_test_per_class: must be positive".into());
                }
                if self.blob_dim == 0 {
                    out.push("blob_dim: must be positive".into());
                }
                if !(self.blob_spread > 0.0 && self.blob_spread.is_finite()) {
                    out.push("blob_spread: must be positive".into());
                }
            }
        }
    }
}

/// Penalty kind before its weight is attached; `Auto` picks the prior loss
/// for the online product strategy and no penalty otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    Auto,
    None,
    Isotropic,
    Anisotropic,
    Prior,
}

impl FromStr for PenaltyKind {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "auto" => Ok(PenaltyKind::Auto),
            "none" => Ok(PenaltyKind::None),
            "isotropic" | "fedprox" => Ok(PenaltyKind::Isotropic),
            "anisotropic" | "fedcurv" => Ok(PenaltyKind::Anisotropic),
            "prior" => Ok(PenaltyKind::Prior),
            _ => Err(()),
        }
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyKind::Auto => "auto",
            PenaltyKind::None => "none",
            PenaltyKind::Isotropic => "isotropic",
            PenaltyKind::Anisotropic => "anisotropic",
            PenaltyKind::Prior => "prior",
        })
    }
}

/// Everything that determines a federated run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    /// Hidden layer widths; empty gives softmax regression.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub clients: usize,
    pub alpha: f64,
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub strategy: AggregationStrategy,
    pub penalty: PenaltyKind,
    pub fisher_mode: FisherMode,
    pub scaling: RoundScaling,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Write measured seconds into `wall_time_s`; off keeps outputs
    /// byte-reproducible.
    pub record_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            hidden: vec![500, 300],
            activation: Activation::Relu,
            clients: 10,
            alpha: 0.01,
            rounds: 10,
            epochs: 5,
            batch_size: 50,
            lr: 0.01,
            lambda: 1.0,
            gamma: 1e-4,
            strategy: AggregationStrategy::GaussianProduct,
            penalty: PenaltyKind::Auto,
            fisher_mode: FisherMode::MinibatchMean,
            scaling: RoundScaling::Anchored,
            seed: 0,
            output_dir: PathBuf::from("out"),
            record_time: false,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&parse_pairs(text)?)?;
        Ok(cfg)
    }

    /// Applies overrides in order, then validates. Every problem is reported.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut problems = Vec::new();
        for (k, v) in pairs {
            if let Err(e) = self.set(k, v) {
                problems.push(e);
            }
        }
        self.problems(&mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let key = key.replace('-', "_");
        let key = key.as_str();
        if let Some(r) = self.data.set(key, value) {
            return r;
        }
        match key {
            "hidden" => parse_layers(key, value).map(|v| self.hidden = v),
            "activation" => parse(key, value).map(|v| self.activation = v),
            "clients" => parse(key, value).map(|v| self.clients = v),
            "alpha" => parse(key, value).map(|v| self.alpha = v),
            "rounds" => parse(key, value).map(|v| self.rounds = v),
            "epochs" => parse(key, value).map(|v| self.epochs = v),
            "batch_size" => parse(key, value).map(|v| self.batch_size = v),
            "lr" => parse(key, value).map(|v| self.lr = v),
            "lambda" => parse(key, value).map(|v| self.lambda = v),
            "gamma" => parse(key, value).map(|v| self.gamma = v),
            "strategy" => parse(key, value).map(|v| self.strategy = v),
            "penalty" => value
                .parse()
                .map(|v| self.penalty = v)
                .map_err(|_| format!("penalty: unknown kind `{value}`")),
            "fisher_mode" => match value {
                "minibatch" => { self.fisher_mode = FisherMode::MinibatchMean; Ok(()) },
                "per_sample" | "per-sample" => { self.fisher_mode = FisherMode::PerSample; Ok(()) },
                _ => Err(format!("fisher_mode: expected minibatch or per-sample, got `{value}`")),
            },
            "scaling" => match value {
                "anchored" => { self.scaling = RoundScaling::Anchored; Ok(()) },
                "literal" => { self.scaling = RoundScaling::Literal; Ok(()) },
                _ => Err(format!("scaling: expected anchored or literal, got `{value}`")),
            },
            "seed" => parse(key, value).map(|v| self.seed = v),
            "output_dir" => {
                self.output_dir = PathBuf::from(value);
                Ok(())
            }
            "record_time" => parse_bool(key, value).map(|v| self.record_time = v),
            _ => Err(format!("{key}: unknown key")),
        }
    }

    /// Collects every violated constraint.
    pub fn problems(&self, out: &mut Vec<String>) {
        self.data.problems(out);
        if self.hidden.contains(&0) {
            out.push("hidden: layer widths must be positive".into());
        }
        if self.clients == 0 {
            out.push("clients: must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            out.push("alpha: must be positive".into());
        }
        if self.rounds == 0 {
            out.push("rounds: must be positive".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size: must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push("lr: must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push("lambda: must be nonnegative".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            out.push("gamma: must be positive".into());
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        self.problems(&mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn local_penalty(&self) -> LocalPenalty {
        let kind = match self.penalty {
            PenaltyKind::Auto => match self.strategy {
                AggregationStrategy::GaussianProduct => PenaltyKind::Prior,
                _ => PenaltyKind::None,
            },
            other => other,
        };
        match kind {
            PenaltyKind::Auto | PenaltyKind::None => LocalPenalty::None,
            PenaltyKind::Isotropic => LocalPenalty::Isotropic(self.lambda),
            PenaltyKind::Anisotropic => LocalPenalty::AnisotropicOffline(self.lambda),
            PenaltyKind::Prior => LocalPenalty::PriorLoss(self.lambda),
        }
    }

    /// Copy with `penalty = auto` replaced by the concrete kind.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.penalty = self.local_penalty().kind().parse().expect("known kind");
        out
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = self.data.entries();
        out.extend([
            ("hidden", join_layers(&self.hidden)),
            ("activation", self.activation.to_string()),
            ("clients", self.clients.to_string()),
            ("alpha", self.alpha.to_string()),
            ("rounds", self.rounds.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lambda", self.lambda.to_string()),
            ("gamma", self.gamma.to_string()),
            ("strategy", self.strategy.to_string()),
            ("penalty", self.penalty.to_string()),
            (
                "fisher_mode",
                match self.fisher_mode {
                    FisherMode::MinibatchMean => "minibatch",
                    FisherMode::PerSample => "per-sample",
                }
                .into(),
            ),
            (
                "scaling",
                match self.scaling {
                    RoundScaling::Anchored => "anchored",
                    RoundScaling::Literal => "literal",
                }
                .into(),
            ),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("record_time", self.record_time.to_string()),
        ]);
        out
    }

    pub fn serialize(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

/// Settings of the two-client Laplace approximation ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeConfig {
    pub data: DataConfig,
    /// Border pixels removed before pooling MNIST images.
    pub crop: usize,
    pub pool: usize,
    pub samples_per_client: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Stopping rule for training a client to its optimum.
    pub max_epochs: usize,
    pub grad_tol: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub rounds: usize,
    /// Local epochs per federated round; matching max_epochs keeps each round
    /// close to the per-client optimum.
    pub round_epochs: usize,
    pub pi1: f64,
    pub grid_points: usize,
    pub dense_cap: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        RidgeConfig {
            data: DataConfig {
                test_size: 10_000,
                ..DataConfig::default()
            },
            crop: 4,
            pool: 2,
            samples_per_client: 5_000,
            lr: 0.01,
            batch_size: 200,
            max_epochs: 30,
            grad_tol: 1e-5,
            gamma: 1e-4,
            lambda: 1.0,
            rounds: 10,
            round_epochs: 30,
            pi1: 0.51,
            grid_points: 21,
            dense_cap: crate::posterior::DEFAULT_DENSE_CAP,
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RidgeConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RidgeConfig::default();
        cfg.apply(&parse_pairs(text)?)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut problems = Vec::new();
        for (k, v) in pairs {
            if let Err(e) = self.set(k, v) {
                problems.push(e);
            }
        }
        self.problems(&mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let key = key.replace('-', "_");
        let key = key.as_str();
        if let Some(r) = self.data.set(key, value) {
            return r;
        }
        match key {
            "crop" => parse(key, value).map(|v| self.crop = v),
            "pool" => parse(key, value).map(|v| self.pool = v),
            "samples_per_client" => parse(key, value).map(|v| self.samples_per_client = v),
            "lr" => parse(key, value).map(|v| self.lr = v),
            "batch_size" => parse(key, value).map(|v| self.batch_size = v),
            "max_epochs" => parse(key, value).map(|v| self.max_epochs = v),
            "grad_tol" => parse(key, value).map(|v| self.grad_tol = v),
            "gamma" => parse(key, value).map(|v| self.gamma = v),
            "lambda" => parse(key, value).map(|v| self.lambda = v),
            "rounds" => parse(key, value).map(|v| self.rounds = v),
            "round_epochs" => parse(key, value).map(|v| self.round_epochs = v),
            "pi1" => parse(key, value).map(|v| self.pi1 = v),
            "grid_points" => parse(key, value).map(|v| self.grid_points = v),
            "dense_cap" => parse(key, value).map(|v| self.dense_cap = v),
            "seed" => parse(key, value).map(|v| self.seed = v),
            "output_dir" => {
                self.output_dir = PathBuf::from(value);
                Ok(())
            }
            _ => Err(format!("{key}: unknown key")),
        }
    }

    pub fn problems(&self, out: &mut Vec<String>) {
        self.data.problems(out);
        if self.pool == 0 {
            out.push("pool: must be positive".into());
        }
        if self.samples_per_client == 0 {
            out.push("samples_per_client: must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push("lr: must be positive".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size: must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            out.push("gamma: must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push("lambda: must be nonnegative".into());
        }
        if !(self.grad_tol >= 0.0) {
            out.push("grad_tol: must be nonnegative".into());
        }
        if !(self.pi1 > 0.0 && self.pi1 < 1.0) {
            out.push("pi1: must lie strictly between 0 and 1".into());
        }
        if self.grid_points < 2 {
            out.push("grid_points: need at least 2".into());
        }
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = self.data.entries();
        out.extend([
            ("crop", self.crop.to_string()),
            ("pool", self.pool.to_string()),
            ("samples_per_client", self.samples_per_client.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("grad_tol", self.grad_tol.to_string()),
            ("gamma", self.gamma.to_string()),
            ("lambda", self.lambda.to_string()),
            ("rounds", self.rounds.to_string()),
            ("round_epochs", self.round_epochs.to_string()),
            ("pi1", self.pi1.to_string()),
            ("grid_points", self.grid_points.to_string()),
            ("dense_cap", self.dense_cap.to_string()),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ]);
        out
    }

    pub fn serialize(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}
