use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::Result;
use crate::nn::{init_params, sgd_step_in_place, task_loss_and_grad, MlpArchitecture, ParamVector};
use crate::runtime::evaluate;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentralizedSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop after the first epoch whose test accuracy reaches this.
    pub target: Option<f64>,
}

/// Plain minibatch SGD on the pooled training set. Returns the final
/// parameters and the test accuracy after each epoch.
pub fn train_centralized(
    arch: &MlpArchitecture,
    train: &LabeledDataset,
    test: &LabeledDataset,
    spec: &CentralizedSpec,
) -> Result<(ParamVector, Vec<f64>)> {
    let mut theta = init_params(arch, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(spec.epochs);
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(spec.batch_size) {
            let (x, y) = train.gather(batch);
            let (_, grad) = task_loss_and_grad(arch, &theta, x.view(), &y)?;
            sgd_step_in_place(&mut theta, &grad, spec.lr)?;
        }
        let acc = evaluate(arch, &theta, test)?;
        history.push(acc);
        if spec.target.is_some_and(|t| acc >= t) {
            break;
        }
    }
    Ok((theta, history))
}
