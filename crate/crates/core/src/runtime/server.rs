use super::{AggregationStrategy, ClientReport};
use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::posterior::{collapse_aggregate, product_aggregate, DiagGaussian, WeightedPosteriorSet};

/// A client's posterior together with its weight `πₙ`.
pub type LocalPosterior = (f64, DiagGaussian);

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: DiagGaussian,
    /// Precision of the initial prior.
    pub gamma: f64,
    /// Rounds completed so far.
    pub round: usize,
    pub strategy: AggregationStrategy,
    /// Weighted sum of the clients' end-of-round Fisher diagonals, when they
    /// report them.
    pub penalty_curvature: Option<Vec<f64>>,
}

impl ServerState {
    /// Starts from `N(init, γ⁻¹ I)`.
    pub fn new(init: ParamVector, gamma: f64, strategy: AggregationStrategy) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidInput(format!("prior precision {gamma} must be positive")));
        }
        Ok(ServerState {
            global: DiagGaussian::isotropic(init, gamma)?,
            gamma,
            round: 0,
            strategy,
            penalty_curvature: None,
        })
    }
}

/// Replaces the global posterior with the aggregate of `reports` and advances
/// the round counter.
pub fn server_aggregate(server: &mut ServerState, reports: &[ClientReport]) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no client reports to aggregate".into()));
    }
    let total: f64 = reports.iter().map(|r| r.weight).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("client weights sum to zero".into()));
    }
    let members: Vec<LocalPosterior> = reports
        .iter()
        .map(|r| (r.weight / total, r.posterior.clone()))
        .collect();
    let set = WeightedPosteriorSet::new(members)?;

    let global = match server.strategy {
        AggregationStrategy::FedAvg => {
            let (mean, _) = collapse_aggregate(&set, false).into_parts();
            DiagGaussian::isotropic(mean, server.gamma)?
        }
        AggregationStrategy::GaussianProduct | AggregationStrategy::GaussianProductOffline => {
            product_aggregate(&set)?
        }
    };

    if reports.iter().all(|r| r.offline_fisher.is_some()) {
        let mut curvature = vec![0.0; set.dim()];
        for r in reports {
            let w = r.weight / total;
            for (c, f) in curvature.iter_mut().zip(r.offline_fisher.as_ref().unwrap()) {
                *c += w * f;
            }
        }
        server.penalty_curvature = Some(curvature);
    }
    server.global = global;
    server.round += 1;
    Ok(())
}
