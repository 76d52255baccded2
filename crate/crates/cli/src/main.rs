use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedlap_core::experiment::{
    first_round_csv, first_round_study, parse_pairs, ridge_ablation, run_experiment, run_sweep,
    summary_csv, write_ridge_outputs, ExperimentConfig, FirstRoundGrid, RidgeConfig, SweepSpec,
};
use fedlap_core::runtime::AggregationStrategy;

/// Declares a struct of optional string flags, one per config key. Values are
/// handed to the config parser so that every bad field is reported together.
macro_rules! config_flags {
    ($name:ident { $($field:ident),* $(,)? }) => {
        #[derive(Args, Debug, Default)]
        struct $name {
            $(
                #[arg(long, allow_hyphen_values = true)]
                $field: Option<String>,
            )*
        }

        impl $name {
            fn pairs(&self) -> Vec<(String, String)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push((stringify!($field).to_string(), v.clone()));
                    }
                )*
                out
            }
        }
    };
}

config_flags!(DataFlags {
    dataset, mnist_dir, train_size, test_size, blob_classes, blob_per_class,
    blob_test_per_class, blob_dim, blob_spread, data_seed,
});

config_flags!(RunFlags {
    hidden, activation, clients, alpha, rounds, epochs, batch_size, lr, lambda, gamma,
    strategy, penalty, fisher_mode, scaling, seed, output_dir, record_time,
});

config_flags!(RidgeFlags {
    crop, pool, samples_per_client, lr, batch_size, max_epochs, grad_tol, gamma, lambda,
    rounds, round_epochs, pi1, grid_points, dense_cap, seed, output_dir,
});

#[derive(Parser, Debug)]
#[command(name = "fedlap", version, about = "Federated learning with Gaussian-product aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train for the configured number of rounds and write metrics.csv.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Grid search over config keys; writes summary.csv.
    Sweep {
        /// Spec file: base config lines plus `axis.<key> = a | b`.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Extra axis as `key=a|b|c`; repeatable.
        #[arg(long = "axis")]
        axes: Vec<String>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        max_cells: Option<usize>,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        run: RunFlags,
    },
    /// One-round aggregation quality per strategy, alpha and client count.
    FirstRound {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "fedavg,fola")]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.01,100")]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "10")]
        client_counts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Two-client curvature ablation on a reduced softmax-regression model.
    Ridge {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        ridge: RidgeFlags,
    },
}

fn read_pairs(path: Option<&Path>) -> Result<Vec<(String, String)>> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(parse_pairs(&text)?)
        }
        None => Ok(Vec::new()),
    }
}

fn experiment_config(file: Option<&Path>, data: &DataFlags, run: &RunFlags) -> Result<ExperimentConfig> {
    let mut pairs = read_pairs(file)?;
    pairs.extend(data.pairs());
    pairs.extend(run.pairs());
    let mut cfg = ExperimentConfig::default();
    cfg.apply(&pairs)?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
}

fn configure_threads() -> Result<()> {
    if let Ok(value) = std::env::var("FEDLAP_THREADS") {
        let threads: usize = value
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("FEDLAP_THREADS must be a positive integer, got `{value}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    configure_threads()?;
    match cli.command {
        Command::Run { config, data, run } => {
            let cfg = experiment_config(config.as_deref(), &data, &run)?;
            let result = run_experiment(&cfg)?;
            let last = result.final_metrics();
            println!("round {} ga {:.4} la {:.4}", last.round, last.ga, last.la);
        }
        Command::Sweep { spec, axes, repeats, max_cells, data, run } => {
            let mut sweep = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    SweepSpec::parse(&text)?
                }
                None => SweepSpec::new(ExperimentConfig::default()),
            };
            let mut overrides = data.pairs();
            overrides.extend(run.pairs());
            sweep.base.apply(&overrides)?;
            for axis in &axes {
                let Some((key, values)) = axis.split_once('=') else {
                    bail!("--axis expects key=a|b, got `{axis}`");
                };
                sweep.add_axis(key.trim(), values);
            }
            if let Some(r) = repeats {
                sweep.repeats = r;
            }
            if let Some(m) = max_cells {
                sweep.max_cells = m;
            }
            let cells = run_sweep(&sweep)?;
            let dir = sweep.base.output_dir.clone();
            write(&dir, "summary.csv", &summary_csv(&sweep, &cells))?;
            write(&dir, "config_resolved.txt", &sweep.base.serialize())?;
            let failed = cells.iter().filter(|c| c.error.is_some()).count();
            println!("{} cells, {failed} failed", cells.len());
        }
        Command::FirstRound { config, strategies, alphas, client_counts, seeds, data, run } => {
            let base = experiment_config(config.as_deref(), &data, &run)?;
            let strategies = strategies
                .iter()
                .map(|s| s.parse::<AggregationStrategy>())
                .collect::<Result<Vec<_>, _>>()?;
            let grid = FirstRoundGrid { base, strategies, alphas, clients: client_counts, seeds };
            let rows = first_round_study(&grid)?;
            let dir = &grid.base.output_dir;
            write(dir, "first_round.csv", &first_round_csv(&rows))?;
            write(dir, "config_resolved.txt", &grid.base.serialize())?;
            println!("{} rows", rows.len());
        }
        Command::Ridge { config, data, ridge } => {
            let mut pairs = read_pairs(config.as_deref())?;
            pairs.extend(data.pairs());
            pairs.extend(ridge.pairs());
            let mut cfg = RidgeConfig::default();
            cfg.apply(&pairs)?;
            let report = ridge_ablation(&cfg)?;
            write_ridge_outputs(&cfg.output_dir, &cfg, &report)?;
            for (name, curve) in &report.curves {
                let best = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                println!("{name:<14} max ga {best:.4}");
            }
            for (name, trace) in &report.rounds {
                println!("{name:<14} final ga {:.4}", trace.last().copied().unwrap_or(f64::NAN));
            }
        }
    }
    Ok(())
}
