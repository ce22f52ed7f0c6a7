use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ensure_finite, mgs_reorth, LinearOperator};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmresOptions {
    /// Relative residual target `||b - Ax|| <= tol ||b||`.
    pub tol: f64,
    /// Krylov dimension per cycle.
    pub restart: usize,
    /// Total inner iterations across all cycles.
    pub maxiter: usize,
}

impl Default for GmresOptions {
    fn default() -> Self {
        GmresOptions { tol: 1e-10, restart: 50, maxiter: 200 }
    }
}

#[derive(Debug, Clone)]
pub struct GmresReport {
    pub x: DVector<f64>,
    /// Residual norms: the true residual at the start of every cycle, then the
    /// least-squares residual after each inner iteration.
    pub residual_history: Vec<f64>,
    /// Index into `residual_history` where each cycle starts.
    pub cycle_starts: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl GmresReport {
    pub fn final_residual(&self) -> f64 {
        *self.residual_history.last().unwrap_or(&f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,residual\n");
        for (i, r) in self.residual_history.iter().enumerate() {
            out.push_str(&format!("{i},{}\n", crate::io::fmt_f64(*r)));
        }
        out
    }
}

fn givens(a: f64, b: f64) -> (f64, f64) {
    if b == 0.0 {
        (1.0, 0.0)
    } else {
        let r = a.hypot(b);
        (a / r, b / r)
    }
}

/// Restarted GMRES with modified Gram-Schmidt (plus one conditional
/// reorthogonalization) and Givens-rotation least squares.
///
/// Stagnation over a whole cycle yields a report with `converged == false`
/// rather than an error.
pub fn gmres(a: &impl LinearOperator, b: &DVector<f64>, x0: &DVector<f64>, opts: &GmresOptions) -> Result<GmresReport> {
    let n = a.dim();
    if b.len() != n {
        return Err(Error::DimensionMismatch { context: "gmres rhs", expected: n, found: b.len() });
    }
    if x0.len() != n {
        return Err(Error::DimensionMismatch { context: "gmres initial guess", expected: n, found: x0.len() });
    }
    if !(opts.tol > 0.0) || opts.restart == 0 {
        return Err(Error::invalid("gmres needs tol > 0 and restart >= 1"));
    }
    ensure_finite(b, "gmres rhs")?;

    let restart = opts.restart.min(n.max(1));
    let bnorm = b.norm();
    let mut history = Vec::new();
    let mut cycle_starts = Vec::new();
    if bnorm == 0.0 {
        return Ok(GmresReport {
            x: DVector::zeros(n),
            residual_history: vec![0.0],
            cycle_starts: vec![0],
            iterations: 0,
            converged: true,
        });
    }
    let target = opts.tol * bnorm;
    let mut x = x0.clone();
    let mut total = 0usize;
    let mut previous_cycle_residual = f64::INFINITY;

    loop {
        let r = b - a.apply(&x)?;
        ensure_finite(&r, "gmres residual")?;
        let beta = r.norm();
        cycle_starts.push(history.len());
        history.push(beta);
        if beta <= target {
            return Ok(GmresReport { x, residual_history: history, cycle_starts, iterations: total, converged: true });
        }
        // A full cycle without progress means the Krylov space is exhausted.
        if total >= opts.maxiter || beta >= previous_cycle_residual * (1.0 - 1e-12) {
            return Ok(GmresReport { x, residual_history: history, cycle_starts, iterations: total, converged: false });
        }
        previous_cycle_residual = beta;

        let mut q = DMatrix::zeros(n, restart + 1);
        let mut h = DMatrix::zeros(restart + 1, restart);
        let mut g = DVector::zeros(restart + 1);
        let mut cs = vec![0.0; restart];
        let mut sn = vec![0.0; restart];
        q.set_column(0, &(&r / beta));
        g[0] = beta;
        let mut k = 0;

        for j in 0..restart {
            if total >= opts.maxiter {
                break;
            }
            let mut w = a.apply(&q.column(j).into_owned())?;
            ensure_finite(&w, "gmres operator output")?;
            let wnorm0 = w.norm();
            let (coeffs, wnorm) = mgs_reorth(&q, j + 1, &mut w);
            for i in 0..=j {
                h[(i, j)] = coeffs[i];
            }
            h[(j + 1, j)] = wnorm;
            for i in 0..j {
                let t = cs[i] * h[(i, j)] + sn[i] * h[(i + 1, j)];
                h[(i + 1, j)] = -sn[i] * h[(i, j)] + cs[i] * h[(i + 1, j)];
                h[(i, j)] = t;
            }
            let (c, s) = givens(h[(j, j)], h[(j + 1, j)]);
            cs[j] = c;
            sn[j] = s;
            h[(j, j)] = c * h[(j, j)] + s * h[(j + 1, j)];
            h[(j + 1, j)] = 0.0;
            if h[(j, j)] == 0.0 {
                // A annihilates the new direction; keep the previous iterate.
                break;
            }
            g[j + 1] = -s * g[j];
            g[j] *= c;
            total += 1;
            k = j + 1;
            let res = g[j + 1].abs();
            history.push(res);
            let breakdown = wnorm <= 1e-14 * wnorm0.max(f64::MIN_POSITIVE);
            if breakdown || res <= target {
                break;
            }
            q.set_column(j + 1, &(&w / wnorm));
        }

        if k > 0 {
            let y = solve_upper(&h.view((0, 0), (k, k)).into_owned(), &g.rows(0, k).into_owned())?;
            x += q.columns(0, k) * y;
        }
    }
}

fn solve_upper(r: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let k = rhs.len();
    let mut y = DVector::zeros(k);
    for i in (0..k).rev() {
        let mut s = rhs[i];
        for j in i + 1..k {
            s -= r[(i, j)] * y[j];
        }
        if r[(i, i)] == 0.0 {
            return Err(Error::Singular("gmres least-squares triangle"));
        }
        y[i] = s / r[(i, i)];
    }
    Ok(y)
}
