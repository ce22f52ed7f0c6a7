use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::dense::{eigenvalues, eigenvector};
use super::{ensure_finite, mgs_reorth, LinearOperator};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ArnoldiResult {
    /// Orthonormal Krylov basis, `n × (steps + 1)`; `n × steps` after an exact breakdown.
    pub q: DMatrix<f64>,
    /// Upper Hessenberg projection, `(steps + 1) × steps`; square after an exact breakdown.
    pub h: DMatrix<f64>,
    pub ritz_values: Vec<Complex64>,
    /// Unit Ritz vectors `Q_m y`, ordered like `ritz_values`.
    pub ritz_vectors: Vec<DVector<Complex64>>,
    /// Residual estimates `||A x - μ x||` from the last Hessenberg row.
    pub ritz_residuals: Vec<f64>,
    pub steps: usize,
    /// The Krylov space became invariant; Ritz pairs are exact eigenpairs.
    pub exact: bool,
}

impl ArnoldiResult {
    pub fn basis(&self) -> DMatrix<f64> {
        self.q.columns(0, self.steps).into_owned()
    }

    pub fn square_h(&self) -> DMatrix<f64> {
        self.h.view((0, 0), (self.steps, self.steps)).into_owned()
    }
}

/// `m_k` steps of Arnoldi from `v0`, then Ritz extraction from the square Hessenberg block.
pub fn arnoldi(a: &impl LinearOperator, v0: &DVector<f64>, m_k: usize) -> Result<ArnoldiResult> {
    let n = a.dim();
    if v0.len() != n {
        return Err(Error::DimensionMismatch { context: "arnoldi start vector", expected: n, found: v0.len() });
    }
    if m_k == 0 || m_k > n {
        return Err(Error::invalid(format!("arnoldi needs 1 <= m_k <= n = {n}, got {m_k}")));
    }
    let v0norm = v0.norm();
    if !(v0norm > 0.0 && v0norm.is_finite()) {
        return Err(Error::invalid("arnoldi start vector must be nonzero and finite"));
    }

    let mut q = DMatrix::zeros(n, m_k + 1);
    let mut h = DMatrix::zeros(m_k + 1, m_k);
    q.set_column(0, &(v0 / v0norm));
    let mut steps = m_k;
    let mut exact = false;

    for j in 0..m_k {
        let mut w = a.apply(&q.column(j).into_owned())?;
        ensure_finite(&w, "arnoldi operator output")?;
        let w0 = w.norm();
        let (coeffs, wnorm) = mgs_reorth(&q, j + 1, &mut w);
        for i in 0..=j {
            h[(i, j)] = coeffs[i];
        }
        h[(j + 1, j)] = wnorm;
        if wnorm <= 1e-12 * w0.max(h.column(j).norm()) || wnorm == 0.0 {
            steps = j + 1;
            exact = true;
            break;
        }
        q.set_column(j + 1, &(&w / wnorm));
    }

    let (q, h) = if exact { (q.columns(0, steps).into_owned(), h.view((0, 0), (steps, steps)).into_owned()) } else { (q, h) };
    let hk = h.view((0, 0), (steps, steps)).into_owned();
    let tail = if exact { 0.0 } else { h[(steps, steps - 1)] };
    let ritz_values = eigenvalues(&hk);
    let basis = crate::krylov::dense::to_complex(&q.columns(0, steps).into_owned());
    let mut ritz_vectors = Vec::with_capacity(steps);
    let mut ritz_residuals = Vec::with_capacity(steps);
    for &mu in &ritz_values {
        let y = eigenvector(&hk, mu)?;
        ritz_residuals.push(tail.abs() * y[steps - 1].norm());
        let x = &basis * &y;
        let norm = x.norm();
        ritz_vectors.push(x / Complex64::new(norm, 0.0));
    }
    Ok(ArnoldiResult { q, h, ritz_values, ritz_vectors, ritz_residuals, steps, exact })
}
