use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{ensure_finite, gmres, EpsRule, FixedPointJacobian, GmresOptions, JacobianOperator, Stepper};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonOptions {
    /// Stop once `||u - S(u)||_2 <= tol_res`.
    pub tol_res: f64,
    /// A damped step shorter than `tol_step (1 + ||u||)` counts as stagnation.
    pub tol_step: f64,
    pub max_newton: usize,
    pub gmres: GmresOptions,
    pub eps: EpsRule,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol_res: 1e-12, tol_step: 1e-15, max_newton: 50, gmres: GmresOptions::default(), eps: EpsRule::Scaled }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub solution: DVector<f64>,
    /// `||ψ||_2` at every iterate, starting with the initial guess.
    pub residual_history: Vec<f64>,
    pub gmres_iterations: Vec<usize>,
    pub iterations: usize,
}

impl NewtonReport {
    pub fn residual(&self) -> f64 {
        *self.residual_history.last().expect("history starts with the initial residual")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,residual\n");
        for (i, r) in self.residual_history.iter().enumerate() {
            out.push_str(&format!("{i},{}\n", crate::io::fmt_f64(*r)));
        }
        out
    }
}

fn residual(stepper: &impl Stepper, u: &DVector<f64>) -> Result<DVector<f64>> {
    let psi = u - stepper.step(u)?;
    ensure_finite(&psi, "fixed-point residual")?;
    Ok(psi)
}

/// Newton-Krylov solve of `ψ(u) = u - S(u) = 0`.
///
/// Each step solves `(I - J) δ = -ψ` with GMRES on finite-difference JVPs and
/// backtracks (halving, at most 8 times) until the Armijo condition on `||ψ||_2` holds.
pub fn newton_krylov_fixed_point(stepper: &impl Stepper, u0: &DVector<f64>, opts: &NewtonOptions) -> Result<NewtonReport> {
    ensure_finite(u0, "newton initial guess")?;
    if u0.len() != stepper.dim() {
        return Err(Error::DimensionMismatch { context: "newton initial guess", expected: stepper.dim(), found: u0.len() });
    }
    let mut u = u0.clone();
    let mut psi = residual(stepper, &u)?;
    let mut rnorm = psi.norm();
    let mut history = vec![rnorm];
    let mut inner = Vec::new();

    for it in 0..opts.max_newton {
        if rnorm <= opts.tol_res {
            return Ok(NewtonReport { solution: u, residual_history: history, gmres_iterations: inner, iterations: it });
        }
        let jac = FixedPointJacobian(JacobianOperator::new(stepper, u.clone(), opts.eps)?);
        let lin = gmres(&jac, &(-&psi), &DVector::zeros(u.len()), &opts.gmres)?;
        inner.push(lin.iterations);
        let delta = lin.x;

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=8 {
            let trial = &u + &delta * t;
            match residual(stepper, &trial) {
                Ok(p) => {
                    let pn = p.norm();
                    if pn <= (1.0 - 1e-4 * t) * rnorm {
                        accepted = Some((trial, p, pn));
                        break;
                    }
                }
                Err(Error::NonFinite(_)) => {}
                Err(e) => return Err(e),
            }
            t *= 0.5;
        }
        let Some((trial, p, pn)) = accepted else {
            return Err(Error::NewtonFailed { reason: "line search", iterations: it + 1, residual: rnorm });
        };
        let step = (&trial - &u).norm();
        u = trial;
        psi = p;
        rnorm = pn;
        history.push(rnorm);
        if rnorm > opts.tol_res && step <= opts.tol_step * (1.0 + u.norm()) {
            return Err(Error::NewtonFailed { reason: "stagnation", iterations: it + 1, residual: rnorm });
        }
    }
    if rnorm <= opts.tol_res {
        return Ok(NewtonReport { solution: u, residual_history: history, gmres_iterations: inner, iterations: opts.max_newton });
    }
    Err(Error::NewtonFailed { reason: "iteration limit", iterations: opts.max_newton, residual: rnorm })
}
