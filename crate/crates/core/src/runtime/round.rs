use std::time::Instant;

use rayon::prelude::*;

use super::{client_update, evaluate, server_aggregate, ClientReport, ClientState, LocalTraining, RoundMetrics, ServerState};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::MlpArchitecture;
use crate::seed::client_rng;

/// Everything a round reads but does not modify.
#[derive(Clone, Copy)]
pub struct RoundEnv<'a> {
    pub arch: &'a MlpArchitecture,
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub training: &'a LocalTraining,
    pub seed: u64,
    /// Worker pool for client updates; the global rayon pool when `None`.
    pub pool: Option<&'a rayon::ThreadPool>,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    pub reports: Vec<ClientReport>,
}

/// Runs one round: every client trains from the current global posterior,
/// the server aggregates, and GA/LA are measured on `env.test`.
pub fn run_round(env: &RoundEnv<'_>, server: &mut ServerState, clients: &mut [ClientState]) -> Result<RoundOutcome> {
    let started = Instant::now();
    let round = server.round + 1;
    if clients.is_empty() {
        return Err(Error::InvalidInput("no clients".into()));
    }
    let global = &server.global;
    let curvature = server.penalty_curvature.as_deref();
    let mut work = || -> Vec<Result<(ClientReport, f64)>> {
        clients
            .par_iter_mut()
            .map(|client| {
                let mut rng = client_rng(env.seed, client.id, round);
                let report = client_update(
                    client, env.arch, env.train, global, curvature, round, server.gamma, env.training, &mut rng,
                )?;
                let acc = evaluate(env.arch, report.posterior.mean(), env.test)?;
                Ok((report, acc))
            })
            .collect()
    };
    let results = match env.pool {
        Some(pool) => pool.install(work),
        None => work(),
    };
    let mut reports = Vec::with_capacity(results.len());
    let mut per_client_accuracy = Vec::with_capacity(results.len());
    for result in results {
        let (report, acc) = result.map_err(|e| Error::Round { round, source: Box::new(e) })?;
        reports.push(report);
        per_client_accuracy.push(acc);
    }

    server_aggregate(server, &reports).map_err(|e| Error::Round { round, source: Box::new(e) })?;
    let ga = evaluate(env.arch, server.global.mean(), env.test)?;
    let total: f64 = reports.iter().map(|r| r.weight).sum();
    let la = reports
        .iter()
        .zip(&per_client_accuracy)
        .map(|(r, a)| r.weight / total * a)
        .sum();
    Ok(RoundOutcome {
        metrics: RoundMetrics {
            round,
            ga,
            la,
            per_client_accuracy,
            wall_time: started.elapsed().as_secs_f64(),
        },
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dirichlet_partition, single_shard, synthetic_blobs, PartitionSpec};
    use crate::nn::init_params;
    use crate::runtime::{prior_loss_and_grad, AggregationStrategy, FisherMode, LocalPenalty, RoundScaling};
    use crate::posterior::DiagGaussian;

    struct Fixture {
        arch: MlpArchitecture,
        train: LabeledDataset,
        test: LabeledDataset,
    }

    fn fixture() -> Fixture {
        let all = synthetic_blobs(4, 80, 6, 1.0, 11);
        let train = all.subset(&(0..240).collect::<Vec<_>>());
        let test = all.subset(&(240..320).collect::<Vec<_>>());
        let arch = MlpArchitecture::new(vec![6, 12, 4], Default::default()).unwrap();
        Fixture { arch, train, test }
    }

    fn training(strategy: AggregationStrategy) -> LocalTraining {
        LocalTraining {
            epochs: 2,
            batch_size: 16,
            lr: 0.1,
            penalty: match strategy {
                AggregationStrategy::GaussianProduct => LocalPenalty::PriorLoss(1.0),
                _ => LocalPenalty::None,
            },
            fisher_mode: FisherMode::MinibatchMean,
            scaling: RoundScaling::Anchored,
            strategy,
        }
    }

    fn run(f: &Fixture, cfg: &LocalTraining, clients_n: usize, alpha: f64, rounds: usize, seed: u64) -> (ServerState, Vec<RoundOutcome>) {
        let shards = if clients_n == 1 {
            vec![single_shard(&f.train)]
        } else {
            dirichlet_partition(&f.train, &PartitionSpec { client_count: clients_n, alpha, seed }).unwrap()
        };
        let d = f.arch.param_count();
        let mut clients: Vec<ClientState> = shards.into_iter().enumerate().map(|(i, s)| ClientState::new(i, s, d)).collect();
        let mut server = ServerState::new(init_params(&f.arch, seed), 1e-4, cfg.strategy).unwrap();
        let env = RoundEnv { arch: &f.arch, train: &f.train, test: &f.test, training: cfg, seed, pool: None };
        let outcomes = (0..rounds).map(|_| run_round(&env, &mut server, &mut clients).unwrap()).collect();
        (server, outcomes)
    }

    #[test]
    fn telescoping_identity_holds() {
        let f = fixture();
        let cfg = training(AggregationStrategy::GaussianProduct);
        let rounds = 5;
        let (server, outcomes) = run(&f, &cfg, 3, 0.5, rounds, 2);
        let d = f.arch.param_count();
        let mut expected = vec![0.0; d];
        for o in &outcomes {
            for r in &o.reports {
                for (e, fi) in expected.iter_mut().zip(&r.fisher) {
                    *e += r.weight * fi / rounds as f64;
                }
            }
        }
        for (p, e) in server.global.precision().iter().zip(&expected) {
            let target = e + 1e-4;
            assert!(((p - target) / target).abs() <= 1e-9, "{p} vs {target}");
        }
    }

    #[test]
    fn la_is_the_weighted_client_accuracy() {
        let f = fixture();
        let (_, outcomes) = run(&f, &training(AggregationStrategy::FedAvg), 4, 1.0, 2, 3);
        for o in outcomes {
            let la: f64 = o.reports.iter().zip(&o.metrics.per_client_accuracy).map(|(r, a)| r.weight * a).sum();
            assert!((la - o.metrics.la).abs() < 1e-12);
        }
    }

    #[test]
    fn single_client_round_is_identity_aggregation() {
        let f = fixture();
        for strategy in [AggregationStrategy::FedAvg, AggregationStrategy::GaussianProduct, AggregationStrategy::GaussianProductOffline] {
            let (server, outcomes) = run(&f, &training(strategy), 1, 1.0, 1, 0);
            let o = &outcomes[0];
            for (a, b) in server.global.mean().iter().zip(o.reports[0].posterior.mean().iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            assert_eq!(o.metrics.ga, o.metrics.per_client_accuracy[0]);
        }
    }

    #[test]
    fn rounds_are_deterministic() {
        let f = fixture();
        let cfg = training(AggregationStrategy::GaussianProduct);
        let (a, oa) = run(&f, &cfg, 3, 0.1, 3, 9);
        let (b, ob) = run(&f, &cfg, 3, 0.1, 3, 9);
        assert_eq!(a.global, b.global);
        for (x, y) in oa.iter().zip(&ob) {
            assert_eq!((x.metrics.ga, x.metrics.la), (y.metrics.ga, y.metrics.la));
            assert_eq!(x.metrics.per_client_accuracy, y.metrics.per_client_accuracy);
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let f = fixture();
        let cfg = training(AggregationStrategy::GaussianProduct);
        let shards = dirichlet_partition(&f.train, &PartitionSpec { client_count: 4, alpha: 0.3, seed: 1 }).unwrap();
        let d = f.arch.param_count();
        let mut last = None;
        for threads in [1, 3] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let mut clients: Vec<ClientState> = shards.iter().cloned().enumerate().map(|(i, s)| ClientState::new(i, s, d)).collect();
            let mut server = ServerState::new(init_params(&f.arch, 1), 1e-4, cfg.strategy).unwrap();
            let env = RoundEnv { arch: &f.arch, train: &f.train, test: &f.test, training: &cfg, seed: 1, pool: Some(&pool) };
            for _ in 0..2 {
                run_round(&env, &mut server, &mut clients).unwrap();
            }
            if let Some(prev) = last.replace(server.global.clone()) {
                assert_eq!(prev, server.global);
            }
        }
    }

    #[test]
    fn precisions_stay_nonnegative() {
        let f = fixture();
        for strategy in [AggregationStrategy::GaussianProduct, AggregationStrategy::GaussianProductOffline] {
            let (server, outcomes) = run(&f, &training(strategy), 3, 0.05, 3, 4);
            assert!(server.global.precision().iter().all(|&p| p > 0.0));
            for o in outcomes {
                for r in o.reports {
                    assert!(r.posterior.precision().iter().all(|&p| p >= 0.0));
                }
            }
        }
    }

    #[test]
    fn equal_isotropic_precisions_reproduce_fedavg() {
        let f = fixture();
        let cfg = training(AggregationStrategy::FedAvg);
        let (_, outcomes) = run(&f, &cfg, 3, 0.5, 1, 6);
        let reports = &outcomes[0].reports;
        let mut fedavg = ServerState::new(init_params(&f.arch, 6), 1e-4, AggregationStrategy::FedAvg).unwrap();
        let mut product = ServerState::new(init_params(&f.arch, 6), 1e-4, AggregationStrategy::GaussianProduct).unwrap();
        let forced: Vec<ClientReport> = reports
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.posterior = DiagGaussian::isotropic(r.posterior.mean().clone(), 0.7).unwrap();
                r
            })
            .collect();
        server_aggregate(&mut fedavg, reports).unwrap();
        server_aggregate(&mut product, &forced).unwrap();
        for (a, b) in fedavg.global.mean().iter().zip(product.global.mean().iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn homogeneous_shards_make_strategies_agree() {
        let all = synthetic_blobs(4, 250, 6, 0.7, 11);
        let f = Fixture {
            arch: MlpArchitecture::new(vec![6, 12, 4], Default::default()).unwrap(),
            train: all.subset(&(0..600).collect::<Vec<_>>()),
            test: all.subset(&(600..1000).collect::<Vec<_>>()),
        };
        let (_, fola) = run(&f, &training(AggregationStrategy::GaussianProduct), 5, 100.0, 5, 8);
        let (_, avg) = run(&f, &training(AggregationStrategy::FedAvg), 5, 100.0, 5, 8);
        let (a, b) = (fola[4].metrics.ga, avg[4].metrics.ga);
        assert!((a - b).abs() <= 0.02, "{a} vs {b}");
    }

    #[test]
    fn prior_gradient_matches_finite_differences() {
        let d = 40;
        let mean: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin()).collect();
        let precision: Vec<f64> = (0..d).map(|i| 0.1 + (i as f64 * 0.71).cos().abs()).collect();
        let prior = DiagGaussian::new(mean, precision).unwrap();
        let theta: Vec<f64> = (0..d).map(|i| (i as f64 * 0.13).cos()).collect();
        let (_, grad) = prior_loss_and_grad(&theta, &prior).unwrap();
        let h = 1e-5;
        for j in 0..d {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[j] += h;
            minus[j] -= h;
            let fd = (prior_loss_and_grad(&plus, &prior).unwrap().0 - prior_loss_and_grad(&minus, &prior).unwrap().0) / (2.0 * h);
            let rel = (fd - grad[j]).abs() / grad[j].abs().max(1e-8);
            assert!(rel < 1e-4, "coordinate {j}: {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn client_errors_carry_the_round() {
        let f = fixture();
        let mut cfg = training(AggregationStrategy::FedAvg);
        cfg.lr = 1e308;
        let shard = single_shard(&f.train);
        let mut clients = vec![ClientState::new(0, shard, f.arch.param_count())];
        let mut server = ServerState::new(init_params(&f.arch, 0), 1e-4, cfg.strategy).unwrap();
        let env = RoundEnv { arch: &f.arch, train: &f.train, test: &f.test, training: &cfg, seed: 0, pool: None };
        let err = run_round(&env, &mut server, &mut clients).unwrap_err();
        assert!(matches!(err, Error::Round { round: 1, .. }), "{err:?}");
    }
}
