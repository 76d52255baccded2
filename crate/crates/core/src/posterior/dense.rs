//! Full-covariance Laplace approximations for softmax regression.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};

use super::{DiagGaussian, PRECISION_FLOOR};
use crate::error::{Error, Result};
use crate::nn::{forward, MlpArchitecture};

/// Largest parameter count for which a dense `d × d` precision is built.
pub const DEFAULT_DENSE_CAP: usize = 4_000;

const SYMMETRY_TOL: f64 = 1e-10;

/// Gaussian with a dense precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGaussian {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidInput(format!(
            "precision matrix is {}x{}, not square",
            m.nrows(),
            m.ncols()
        )));
    }
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(Error::InvalidInput(format!(
                    "precision matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

impl DenseGaussian {
    /// Checks shape, finiteness and symmetry. Positive semi-definiteness is
    /// the caller's contract (see [`DenseGaussian::min_eigenvalue`]).
    pub fn new(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&precision)?;
        if precision.nrows() != mean.len() {
            return Err(Error::InvalidInput(format!(
                "mean has length {} but precision is {}x{}",
                mean.len(),
                precision.nrows(),
                precision.ncols()
            )));
        }
        if mean.iter().chain(precision.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite entries".into()));
        }
        Ok(DenseGaussian { mean, precision })
    }

    pub fn from_diag(g: &DiagGaussian) -> Self {
        DenseGaussian {
            mean: DVector::from_column_slice(g.mean()),
            precision: DMatrix::from_diagonal(&DVector::from_column_slice(g.precision())),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.precision.clone())
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// Log density; `-inf` when the precision is not positive definite.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let Some(chol) = self.precision.clone().cholesky() else {
            return f64::NEG_INFINITY;
        };
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let diff = DVector::from_column_slice(theta) - &self.mean;
        let quad = diff.dot(&(&self.precision * &diff));
        0.5 * (log_det - self.dim() as f64 * super::LN_2PI - quad)
    }
}

/// Solves `P x = b` for a symmetric `P`, falling back to LU when `P` is not
/// positive definite.
fn solve_symmetric(p: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = p.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    let singular = || {
        let indices = (0..p.nrows())
            .filter(|&i| !(p[(i, i)] >= PRECISION_FLOOR))
            .collect();
        Error::DegeneratePrecision { indices }
    };
    let x = p.clone().full_piv_lu().solve(b).ok_or_else(singular)?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(singular())
    }
}

pub(crate) fn fuse_dense(members: &[(f64, &DenseGaussian)]) -> Result<DenseGaussian> {
    let Some((_, first)) = members.first() else {
        return Err(Error::InvalidInput("empty posterior set".into()));
    };
    let d = first.dim();
    if members.iter().any(|(_, g)| g.dim() != d) {
        return Err(Error::InvalidInput("posteriors differ in dimension".into()));
    }
    let mut precision = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for (w, g) in members {
        precision += &g.precision * *w;
        rhs += (&g.precision * &g.mean) * *w;
    }
    let mean = solve_symmetric(&precision, &rhs)?;
    Ok(DenseGaussian { mean, precision })
}

/// Full-matrix product aggregation: solves `(Σ πₙPₙ) μ_S = Σ πₙPₙμₙ`.
pub fn dense_product_aggregate(members: &[(f64, DenseGaussian)]) -> Result<DenseGaussian> {
    let total: f64 = members.iter().map(|(w, _)| w).sum();
    if (total - 1.0).abs() > 1e-12 || members.iter().any(|(w, _)| !(0.0..=1.0).contains(w)) {
        return Err(Error::InvalidInput(format!(
            "weights must lie in [0, 1] and sum to 1 (sum is {total})"
        )));
    }
    let refs: Vec<(f64, &DenseGaussian)> = members.iter().map(|(w, g)| (*w, g)).collect();
    fuse_dense(&refs)
}

/// Hessian of the mean cross-entropy of softmax regression:
/// `(1/m) Σᵢ (diag(pᵢ) − pᵢpᵢᵀ) ⊗ x̃ᵢx̃ᵢᵀ` with `x̃ = (x, 1)`, laid out in the
/// flat parameter order (weights row-major, then biases).
pub fn full_hessian_softmax(
    arch: &MlpArchitecture,
    theta: &[f64],
    x: ArrayView2<f64>,
    cap: usize,
) -> Result<DMatrix<f64>> {
    if arch.has_hidden_layers() {
        return Err(Error::UnsupportedArchitecture(format!(
            "the dense Hessian needs softmax regression, got {arch}"
        )));
    }
    let d = arch.param_count();
    if d > cap {
        return Err(Error::TooLarge { dim: d, cap });
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let probs = forward(arch, theta, x)?;
    let m = x.nrows();
    let p = arch.input_dim();
    let k = arch.class_count();

    let mut augmented = Array2::ones((m, p + 1));
    augmented.slice_mut(ndarray::s![.., ..p]).assign(&x);
    let index = |class: usize, feature: usize| {
        if feature < p {
            class * p + feature
        } else {
            k * p + class
        }
    };

    let mut hessian = DMatrix::zeros(d, d);
    for c in 0..k {
        for c2 in c..k {
            let mut scaled = augmented.clone();
            for (i, mut row) in scaled.axis_iter_mut(Axis(0)).enumerate() {
                let a = if c == c2 {
                    probs[[i, c]] * (1.0 - probs[[i, c]])
                } else {
                    -probs[[i, c]] * probs[[i, c2]]
                };
                row *= a / m as f64;
            }
            let gram = augmented.t().dot(&scaled);
            for f in 0..=p {
                for f2 in 0..=p {
                    let v = gram[[f, f2]];
                    hessian[(index(c, f), index(c2, f2))] = v;
                    hessian[(index(c2, f2), index(c, f))] = v;
                }
            }
        }
    }
    Ok(hessian)
}

/// Diagonal precision built from the eigenvalues of a dense precision,
/// sorted in descending order and placed in coordinate order.
pub fn efull_from_dense(dense: &DenseGaussian) -> Result<DiagGaussian> {
    check_symmetric(&dense.precision)?;
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(dense.precision.clone())
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    DiagGaussian::new(dense.mean.as_slice().to_vec(), eigenvalues)
}
