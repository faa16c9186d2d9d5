//! Polynomial kernels, their explicit feature maps, weighted multi-kernels,
//! Gram-matrix PSD checks and a small dense kernel ridge regression baseline.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KvnnError, Result};
use crate::parallel;
use crate::tensor::{dot, enumerate_multi_indices, monomial_eval, multinomial_coefficient};

/// Non-negative per-order weights `a_1 .. a_p`; the multi-kernel is
/// `sum_r a_r^2 (x . x')^r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiKernelWeights {
    a: Vec<f64>,
}

impl MultiKernelWeights {
    pub fn new(a: Vec<f64>) -> Result<Self> {
        if a.is_empty() {
            return Err(KvnnError::InvalidArgument("need at least one order".into()));
        }
        if let Some(v) = a.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(KvnnError::InvalidArgument(format!(
                "multi-kernel weights must be finite and non-negative, got {v}"
            )));
        }
        Ok(Self { a })
    }

    pub fn max_order(&self) -> usize {
        self.a.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.a
    }
}

/// Which kernel a Gram matrix or KRR model uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    Poly(u32),
    Multi(MultiKernelWeights),
}

impl KernelSpec {
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            KernelSpec::Poly(r) => poly_kernel(*r, x, y),
            KernelSpec::Multi(w) => multi_kernel(w, x, y),
        }
    }
}

/// `(x . x')^r`.
pub fn poly_kernel(r: u32, x: &[f64], y: &[f64]) -> Result<f64> {
    if r == 0 {
        return Err(KvnnError::InvalidArgument("kernel order must be >= 1".into()));
    }
    check_dim(x.len(), y.len())?;
    Ok(dot(x, y).powi(r as i32))
}

/// Explicit degree-`r` embedding: component `alpha` is
/// `sqrt(multinomial(alpha)) * x^alpha`, in the crate's canonical multi-index order.
pub fn feature_map(r: u32, x: &[f64]) -> Result<Vec<f64>> {
    if r == 0 {
        return Err(KvnnError::InvalidArgument("feature map order must be >= 1".into()));
    }
    enumerate_multi_indices(x.len(), r)?
        .iter()
        .map(|m| Ok((multinomial_coefficient(m)? as f64).sqrt() * monomial_eval(x, m)?))
        .collect()
}

/// `sum_r a_r^2 (x . x')^r`.
pub fn multi_kernel(w: &MultiKernelWeights, x: &[f64], y: &[f64]) -> Result<f64> {
    check_dim(x.len(), y.len())?;
    let s = dot(x, y);
    Ok(w
        .weights()
        .iter()
        .enumerate()
        .map(|(k, a)| a * a * s.powi(k as i32 + 1))
        .sum())
}

/// Concatenation `(a_1 phi_1(x), .., a_p phi_p(x))`, whose inner products reproduce
/// [`multi_kernel`].
pub fn concatenated_feature_map(w: &MultiKernelWeights, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (k, a) in w.weights().iter().enumerate() {
        out.extend(feature_map(k as u32 + 1, x)?.into_iter().map(|v| a * v));
    }
    Ok(out)
}

/// Dense Gram matrix `G[i][j] = K(x_i, x_j)`, filled from the upper triangle.
pub fn gram_matrix(kernel: &KernelSpec, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = points.len();
    let d = points.first().map_or(0, |p| p.len());
    for p in points {
        check_dim(d, p.len())?;
    }
    let rows = parallel::map_indexed(n, |i| {
        (i..n)
            .map(|j| kernel.eval(&points[i], &points[j]))
            .collect::<Result<Vec<f64>>>()
    });
    let mut g = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row?.into_iter().enumerate() {
            g[(i, i + off)] = v;
            g[(i + off, i)] = v;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdReport {
    pub min_eig: f64,
    pub max_eig: f64,
    pub tol: f64,
    pub pass: bool,
}

const EIGEN_MAX_ITER: usize = 10_000;

/// Eigenvalue range of a symmetric matrix and the tolerance-scaled PSD verdict.
///
/// Passes iff `min_eig >= -tol * max(1, max_eig)`. Non-convergence is an
/// error, not a failed check.
pub fn psd_report(matrix: &DMatrix<f64>, tol: f64) -> Result<PsdReport> {
    if !matrix.is_square() {
        return Err(KvnnError::InvalidArgument("matrix must be square".into()));
    }
    let eig = SymmetricEigen::try_new(matrix.clone(), f64::EPSILON, EIGEN_MAX_ITER).ok_or_else(
        || KvnnError::EigenFailure(format!("{n}x{n} matrix", n = matrix.nrows())),
    )?;
    let min_eig = eig.eigenvalues.min();
    let max_eig = eig.eigenvalues.max();
    Ok(PsdReport {
        min_eig,
        max_eig,
        tol,
        pass: min_eig >= -tol * max_eig.max(1.0),
    })
}

pub fn gram_psd_check(kernel: &KernelSpec, points: &[Vec<f64>], tol: f64) -> Result<PsdReport> {
    if points.len() < 2 {
        return Err(KvnnError::InvalidArgument("PSD check needs at least 2 points".into()));
    }
    psd_report(&gram_matrix(kernel, points)?, tol)
}

/// Sample-centred kernel expansion `f(x) = sum_j gamma_j K(x, x_j)`.
///
/// Storage is one center per training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrrModel {
    pub kernel: KernelSpec,
    pub centers: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
}

impl KrrModel {
    pub fn stored_centers(&self) -> usize {
        self.centers.len()
    }
}

/// Solve `(G + lambda I) gamma = y` by dense Cholesky.
pub fn krr_fit(samples: &[Vec<f64>], targets: &[f64], kernel: KernelSpec, lambda: f64) -> Result<KrrModel> {
    if samples.is_empty() {
        return Err(KvnnError::InvalidArgument("KRR needs at least one sample".into()));
    }
    check_dim(samples.len(), targets.len())?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(KvnnError::InvalidArgument(format!("ridge must be >= 0, got {lambda}")));
    }
    let n = samples.len();
    let mut g = gram_matrix(&kernel, samples)?;
    for i in 0..n {
        g[(i, i)] += lambda;
    }
    if lambda == 0.0 {
        let rep = psd_report(&g, 0.0)?;
        if rep.min_eig <= 1e-12 * rep.max_eig.abs().max(f64::MIN_POSITIVE) {
            return Err(KvnnError::Singular(format!(
                "Gram matrix is singular at lambda = 0 (min eigenvalue {:.3e}); use lambda > 0",
                rep.min_eig
            )));
        }
    }
    let chol = g.cholesky().ok_or_else(|| {
        KvnnError::Singular(format!(
            "Gram + lambda I is not positive definite at lambda = {lambda}; increase lambda"
        ))
    })?;
    let gamma = chol.solve(&DVector::from_column_slice(targets));
    Ok(KrrModel {
        kernel,
        centers: samples.to_vec(),
        coefficients: gamma.iter().copied().collect(),
        lambda,
    })
}

pub fn krr_predict(model: &KrrModel, x: &[f64]) -> Result<f64> {
    model
        .centers
        .iter()
        .zip(&model.coefficients)
        .map(|(c, g)| Ok(g * model.kernel.eval(x, c)?))
        .sum()
}
