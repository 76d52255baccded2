//! Dense multilayer perceptrons with hand-derived backpropagation.
//!
//! All weights live in one flat [`ParamVector`]. The layout is layer-major;
//! inside a layer the weight matrix (shape `out × in`, row-major) comes first,
//! followed by the `out` biases. Posterior means and precisions index into the
//! same layout, so it must never change.

use std::ops::{Deref, DerefMut};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Flat vector of every model weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Multiplies `delta` by the activation derivative, given the activated output.
    fn backprop(self, delta: &mut Array2<f64>, activated: &Array2<f64>) {
        match self {
            Activation::Relu => delta.zip_mut_with(activated, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            }),
            Activation::Tanh => delta.zip_mut_with(activated, |d, &a| *d *= 1.0 - a * a),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidInput(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

/// Layer widths of a softmax-output MLP. Hidden layers use `activation`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpArchitecture {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

/// Location of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpan {
    pub inputs: usize,
    pub outputs: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSpan {
    pub fn end(&self) -> usize {
        self.bias_offset + self.outputs
    }
}

impl MlpArchitecture {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidInput(
                "an architecture needs at least an input and an output layer".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidInput("layer sizes must be positive".into()));
        }
        Ok(MlpArchitecture {
            layer_sizes,
            activation,
        })
    }

    /// Single-layer softmax regression.
    pub fn softmax_regression(inputs: usize, classes: usize) -> Result<Self> {
        Self::new(vec![inputs, classes], Activation::default())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn has_hidden_layers(&self) -> bool {
        self.layer_sizes.len() > 2
    }

    pub fn layers(&self) -> Vec<LayerSpan> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let span = LayerSpan {
                    inputs: w[0],
                    outputs: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset = span.end();
                span
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn check_params(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::InvalidInput(format!(
                "parameter vector has length {}, architecture needs {}",
                theta.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "input rows have length {}, architecture expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for MlpArchitecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let sizes: Vec<String> = self.layer_sizes.iter().map(|s| s.to_string()).collect();
        f.write_str(&sizes.join("-"))
    }
}

fn weight_view<'a>(theta: &'a [f64], span: &LayerSpan) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape(
        (span.outputs, span.inputs),
        &theta[span.weight_offset..span.bias_offset],
    )
    .expect("layer span matches architecture")
}

fn bias_view<'a>(theta: &'a [f64], span: &LayerSpan) -> ArrayView1<'a, f64> {
    ArrayView1::from(&theta[span.bias_offset..span.end()])
}

/// Fan-in scaled uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
pub fn init_params(arch: &MlpArchitecture, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0.0; arch.param_count()];
    for span in arch.layers() {
        let bound = 1.0 / (span.inputs as f64).sqrt();
        for w in &mut theta[span.weight_offset..span.bias_offset] {
            *w = rng.random_range(-bound..bound);
        }
    }
    ParamVector(theta)
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Activations of every layer; the last entry holds class probabilities.
fn forward_trace(arch: &MlpArchitecture, theta: &[f64], x: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let layers = arch.layers();
    let mut trace: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
    for (i, span) in layers.iter().enumerate() {
        let input = if i == 0 { x } else { trace[i - 1].view() };
        let mut z = input.dot(&weight_view(theta, span).t());
        z += &bias_view(theta, span);
        if i + 1 == layers.len() {
            softmax_rows(&mut z);
        } else {
            arch.activation.apply(&mut z);
        }
        trace.push(z);
    }
    trace
}

/// Class probabilities for each input row.
pub fn forward(arch: &MlpArchitecture, theta: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>> {
    arch.check_params(theta)?;
    arch.check_inputs(&x)?;
    Ok(forward_trace(arch, theta, x).pop().unwrap())
}

fn check_labels(arch: &MlpArchitecture, x: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if labels.len() != x.nrows() {
        return Err(Error::InvalidInput(format!(
            "{} input rows but {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    let k = arch.class_count();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidInput(format!(
            "label {bad} outside [0, {k})"
        )));
    }
    Ok(())
}

fn mean_nll(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / labels.len() as f64
}

/// Mean cross-entropy of the batch.
pub fn task_loss(
    arch: &MlpArchitecture,
    theta: &[f64],
    x: ArrayView2<f64>,
    labels: &[usize],
) -> Result<f64> {
    arch.check_params(theta)?;
    arch.check_inputs(&x)?;
    check_labels(arch, &x, labels)?;
    let probs = forward_trace(arch, theta, x).pop().unwrap();
    Ok(mean_nll(&probs, labels))
}

/// Mean cross-entropy of the batch and its exact gradient.
pub fn task_loss_and_grad(
    arch: &MlpArchitecture,
    theta: &[f64],
    x: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(f64, ParamVector)> {
    arch.check_params(theta)?;
    arch.check_inputs(&x)?;
    check_labels(arch, &x, labels)?;

    let layers = arch.layers();
    let trace = forward_trace(arch, theta, x);
    let probs = trace.last().unwrap();
    let loss = mean_nll(probs, labels);

    let batch = labels.len() as f64;
    let mut delta = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        delta[[i, y]] -= 1.0;
    }
    delta /= batch;

    let mut grad = vec![0.0; arch.param_count()];
    for (i, span) in layers.iter().enumerate().rev() {
        let input = if i == 0 { x } else { trace[i - 1].view() };
        let grad_w = delta.t().dot(&input);
        for (dst, src) in grad[span.weight_offset..span.bias_offset]
            .iter_mut()
            .zip(grad_w.iter())
        {
            *dst = *src;
        }
        let grad_b: Array1<f64> = delta.sum_axis(Axis(0));
        grad[span.bias_offset..span.end()].copy_from_slice(grad_b.as_slice().unwrap());

        if i > 0 {
            let mut upstream = delta.dot(&weight_view(theta, span));
            arch.activation.backprop(&mut upstream, &trace[i - 1]);
            delta = upstream;
        }
    }
    Ok((loss, ParamVector(grad)))
}

/// One minibatch gradient observed during training.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRecord {
    pub grad: ParamVector,
    /// 1-based optimizer step.
    pub step_index: usize,
    pub batch_size: usize,
}

/// `θ − lr·grad`.
pub fn sgd_step(theta: &[f64], grad: &[f64], lr: f64) -> Result<ParamVector> {
    let mut next = ParamVector(theta.to_vec());
    sgd_step_in_place(&mut next, grad, lr)?;
    Ok(next)
}

pub fn sgd_step_in_place(theta: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidInput(format!("learning rate must be positive, got {lr}")));
    }
    if theta.len() != grad.len() {
        return Err(Error::InvalidInput(format!(
            "gradient length {} does not match parameters {}",
            grad.len(),
            theta.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient entry at index {i}")));
    }
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= lr * g;
    }
    Ok(())
}

/// Index of the largest probability in each row; ties go to the lowest class.
pub fn predict(arch: &MlpArchitecture, theta: &[f64], x: ArrayView2<f64>) -> Result<Vec<usize>> {
    let probs = forward(arch, theta, x)?;
    Ok(probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn arch(sizes: &[usize]) -> MlpArchitecture {
        MlpArchitecture::new(sizes.to_vec(), Activation::Relu).unwrap()
    }

    #[test]
    fn mnist_mlp_parameter_count() {
        let a = arch(&[784, 500, 300, 10]);
        assert_eq!(a.param_count(), 784 * 500 + 500 + 500 * 300 + 300 + 300 * 10 + 10);
        assert_eq!(a.param_count(), 545_810);
        assert_eq!(a.layers().last().unwrap().end(), 545_810);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = arch(&[2, 2]);
        let t1 = init_params(&a, 7);
        assert_eq!(t1, init_params(&a, 7));
        assert_ne!(t1, init_params(&a, 8));
        assert_eq!(&t1[4..6], &[0.0, 0.0]);

        let b = arch(&[5, 4, 3]);
        let t = init_params(&b, 1);
        for span in b.layers() {
            assert!(t[span.bias_offset..span.end()].iter().all(|&v| v == 0.0));
            let bound = 1.0 / (span.inputs as f64).sqrt();
            assert!(t[span.weight_offset..span.bias_offset]
                .iter()
                .all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn rejects_degenerate_architectures() {
        assert!(MlpArchitecture::new(vec![3], Activation::Relu).is_err());
        assert!(MlpArchitecture::new(vec![3, 0, 2], Activation::Relu).is_err());
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let a = arch(&[3, 4, 10]);
        let theta = ParamVector::zeros(a.param_count());
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let p = forward(&a, &theta, x.view()).unwrap();
        assert!(p.iter().all(|&v| (v - 0.1).abs() < 1e-15));

        let (loss, _) = task_loss_and_grad(&a, &theta, x.view(), &[0, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_softmax() {
        // W = [[1, 2], [-1, 0.5]], b = [0.1, -0.2], x = [0.5, 1.0]
        let a = arch(&[2, 2]);
        let theta = [1.0, 2.0, -1.0, 0.5, 0.1, -0.2];
        let x = array![[0.5, 1.0]];
        let z0: f64 = 0.5 + 2.0 + 0.1;
        let z1: f64 = -0.5 + 0.5 - 0.2;
        let e0 = z0.exp();
        let e1 = z1.exp();
        let p = forward(&a, &theta, x.view()).unwrap();
        assert!((p[[0, 0]] - e0 / (e0 + e1)).abs() < 1e-15);
        assert!((p[[0, 1]] - e1 / (e0 + e1)).abs() < 1e-15);
    }

    #[test]
    fn rows_are_batch_independent() {
        let a = arch(&[3, 5, 4]);
        let theta = init_params(&a, 3);
        let single = array![[0.3, -0.2, 0.9]];
        let pair = array![[0.3, -0.2, 0.9], [1.0, 2.0, 3.0]];
        let p1 = forward(&a, &theta, single.view()).unwrap();
        let p2 = forward(&a, &theta, pair.view()).unwrap();
        assert_eq!(p1.row(0), p2.row(0));
    }

    #[test]
    fn duplicated_batch_has_identical_loss_and_grad() {
        let a = arch(&[3, 4, 3]);
        let theta = init_params(&a, 11);
        let x = array![[0.3, -0.2, 0.9], [1.0, 0.0, -0.5]];
        let xx = array![
            [0.3, -0.2, 0.9],
            [0.3, -0.2, 0.9],
            [1.0, 0.0, -0.5],
            [1.0, 0.0, -0.5]
        ];
        let (l1, g1) = task_loss_and_grad(&a, &theta, x.view(), &[2, 0]).unwrap();
        let (l2, g2) = task_loss_and_grad(&a, &theta, xx.view(), &[2, 2, 0, 0]).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let a = arch(&[2, 3]);
        let theta = ParamVector::zeros(a.param_count());
        let x = array![[0.0, 1.0]];
        assert!(matches!(
            task_loss_and_grad(&a, &theta, x.view(), &[3]),
            Err(Error::InvalidInput(_))
        ));
        let wide = array![[0.0, 1.0, 2.0]];
        assert!(matches!(
            forward(&a, &theta, wide.view()),
            Err(Error::InvalidInput(_))
        ));
        assert!(task_loss_and_grad(&a, &theta[..3], x.view(), &[0]).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        assert_eq!(*sgd_step(&[1.0, 1.0], &[2.0, -2.0], 0.5).unwrap(), [0.0, 2.0]);
        assert_eq!(*sgd_step(&[1.0, 3.0], &[0.0, 0.0], 0.1).unwrap(), [1.0, 3.0]);
        let g = [0.25, -0.5];
        let twice = sgd_step(&sgd_step(&[1.0, 2.0], &g, 0.5).unwrap(), &g, 0.5).unwrap();
        let once = sgd_step(&[1.0, 2.0], &g, 1.0).unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn sgd_rejects_bad_inputs() {
        assert!(matches!(
            sgd_step(&[1.0], &[f64::NAN], 0.1),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            sgd_step(&[1.0], &[1.0], 0.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn predict_breaks_ties_low() {
        let a = arch(&[2, 3]);
        let theta = ParamVector::zeros(a.param_count());
        let x = array![[0.5, 0.5]];
        assert_eq!(predict(&a, &theta, x.view()).unwrap(), vec![0]);
    }

    #[test]
    fn tanh_backprop_matches_finite_differences() {
        let a = MlpArchitecture::new(vec![3, 4, 2], Activation::Tanh).unwrap();
        let theta = init_params(&a, 5);
        let x = array![[0.3, -0.7, 0.2], [0.9, 0.1, -0.4]];
        let labels = [1, 0];
        let (_, grad) = task_loss_and_grad(&a, &theta, x.view(), &labels).unwrap();
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (task_loss(&a, &plus, x.view(), &labels).unwrap()
                - task_loss(&a, &minus, x.view(), &labels).unwrap())
                / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8, "coordinate {i}: {fd} vs {}", grad[i]);
        }
    }
}
