//! Matrix-free linear algebra wrapped around black-box timesteppers.
//!
//! Everything here talks to the dynamics only through [`Stepper::step`]
//! (a full-state map) or [`LinearOperator::apply`] (a matrix-vector product).

mod arnoldi;
pub mod dense;
mod gmres;
mod jvp;
mod newton;

pub use arnoldi::{arnoldi, ArnoldiResult};
pub use gmres::{gmres, GmresOptions, GmresReport};
pub use jvp::{jvp, EpsRule, FixedPointJacobian, JacobianOperator};
pub use newton::{newton_krylov_fixed_point, NewtonOptions, NewtonReport};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A map `u ↦ S(u)` on `R^n`, typically one reporting step of some dynamics.
pub trait Stepper {
    fn dim(&self) -> usize;
    fn step(&self, u: &DVector<f64>) -> Result<DVector<f64>>;
}

impl<S: Stepper + ?Sized> Stepper for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn step(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).step(u)
    }
}

/// Adapts a closure into a [`Stepper`].
pub struct FnStepper<F> {
    n: usize,
    f: F,
}

impl<F> FnStepper<F>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    pub fn new(n: usize, f: F) -> Self {
        FnStepper { n, f }
    }
}

impl<F> Stepper for FnStepper<F>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    fn dim(&self) -> usize {
        self.n
    }
    fn step(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        (self.f)(u)
    }
}

/// `v ↦ A v` on `R^n`.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>>;
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.ncols() {
            return Err(Error::DimensionMismatch { context: "matrix operator", expected: self.ncols(), found: v.len() });
        }
        Ok(self * v)
    }
}

impl<A: LinearOperator + ?Sized> LinearOperator for &A {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).apply(v)
    }
}

/// Column-by-column dense assembly of a matrix-free operator.
pub fn assemble_dense(op: &impl LinearOperator) -> Result<DMatrix<f64>> {
    let n = op.dim();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        out.set_column(j, &op.apply(&e)?);
    }
    Ok(out)
}

pub(crate) fn ensure_finite(v: &DVector<f64>, context: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

/// Orthogonalizes `w` against the first `k` columns of `q` by modified Gram-Schmidt,
/// repeating once when the norm drops below 0.7 of its incoming value.
/// Returns the projection coefficients and the final norm of `w`.
pub(crate) fn mgs_reorth(q: &DMatrix<f64>, k: usize, w: &mut DVector<f64>) -> (DVector<f64>, f64) {
    let mut coeffs = DVector::zeros(k);
    let mut before = w.norm();
    for pass in 0..2 {
        for i in 0..k {
            let qi = q.column(i);
            let c = qi.dot(w);
            w.axpy(-c, &qi, 1.0);
            coeffs[i] += c;
        }
        let after = w.norm();
        if pass == 0 && after < 0.7 * before {
            before = after;
            continue;
        }
        return (coeffs, after);
    }
    let norm = w.norm();
    (coeffs, norm)
}
