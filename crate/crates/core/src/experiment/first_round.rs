use rayon::prelude::*;

use super::{load_data, run_with_data, ExperimentConfig};
use crate::error::Result;
use crate::runtime::AggregationStrategy;

/// Cells of the round-1 aggregation study.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstRoundGrid {
    pub base: ExperimentConfig,
    pub strategies: Vec<AggregationStrategy>,
    pub alphas: Vec<f64>,
    pub clients: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirstRoundRow {
    pub strategy: AggregationStrategy,
    pub alpha: f64,
    pub clients: usize,
    pub seed: u64,
    pub ga: f64,
    pub la: f64,
}

/// Trains one round per cell and seed and records GA of the aggregate.
pub fn first_round_study(grid: &FirstRoundGrid) -> Result<Vec<FirstRoundRow>> {
    grid.base.validate()?;
    let (train, test) = load_data(&grid.base.data)?;
    let mut jobs = Vec::new();
    for &alpha in &grid.alphas {
        for &clients in &grid.clients {
            for &seed in &grid.seeds {
                for &strategy in &grid.strategies {
                    let mut cfg = grid.base.clone();
                    cfg.rounds = 1;
                    cfg.alpha = alpha;
                    cfg.clients = clients;
                    cfg.seed = seed;
                    cfg.strategy = strategy;
                    jobs.push(cfg);
                }
            }
        }
    }
    jobs.into_par_iter()
        .map(|cfg| {
            let result = run_with_data(&cfg, &train, &test, &mut ())?;
            let m = result.final_metrics();
            Ok(FirstRoundRow {
                strategy: cfg.strategy,
                alpha: cfg.alpha,
                clients: cfg.clients,
                seed: cfg.seed,
                ga: m.ga,
                la: m.la,
            })
        })
        .collect()
}

pub fn first_round_csv(rows: &[FirstRoundRow]) -> String {
    let mut out = String::from("strategy,alpha,clients,seed,ga,la\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.strategy, r.alpha, r.clients, r.seed, r.ga, r.la
        ));
    }
    out
}
