//! Finite-difference reference plant for the controlled Bratu problem
//!
//! `u_t = u_xx + λ exp(u) + b(x)·z`, homogeneous Dirichlet conditions on both ends,
//! three-point Laplacian and forward-Euler substeps inside each reporting step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Grid};

/// Saddle-node of the steady Bratu problem on the unit interval.
pub const LAMBDA_CRITICAL: f64 = 3.513830719;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub lambda: f64,
    pub dt_report: f64,
    pub dt_inner: f64,
    pub grid: Grid,
}

impl PlantConfig {
    pub fn new(lambda: f64, dt_report: f64, dt_inner: f64, grid: Grid) -> Result<Self> {
        let cfg = PlantConfig { lambda, dt_report, dt_inner, grid };
        cfg.validate()?;
        Ok(cfg)
    }

    /// λ = 2 on 51 nodes, Δt = 1e-3 with ten 1e-4 Euler substeps.
    pub fn bratu_default() -> Self {
        PlantConfig { lambda: 2.0, dt_report: 1e-3, dt_inner: 1e-4, grid: Grid { m: 51, x_lo: 0.0, x_hi: 1.0 } }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.dt_inner > 0.0 && self.dt_inner <= self.dt_report) {
            return Err(Error::invalid(format!("need 0 < dt_inner <= dt_report, got {} and {}", self.dt_inner, self.dt_report)));
        }
        let ratio = self.dt_report / self.dt_inner;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::invalid(format!("dt_report/dt_inner = {ratio} is not an integer")));
        }
        let bound = 0.5 * self.grid.h() * self.grid.h();
        if self.dt_inner > bound {
            return Err(Error::UnstableStep { dt_inner: self.dt_inner, bound });
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        (self.dt_report / self.dt_inner).round() as usize
    }

    /// Same plant with a different reporting horizon.
    pub fn with_dt_report(&self, dt_report: f64) -> Result<Self> {
        Self::new(self.lambda, dt_report, self.dt_inner, self.grid)
    }
}

/// Gaussian actuator bumps `b_i(x) = exp(-(x - c_i)^2 / (2σ^2))` sampled on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorSet {
    centers: Vec<f64>,
    sigma: f64,
    b: DMatrix<f64>,
}

impl ActuatorSet {
    /// Boundary rows are zeroed so actuation never touches the Dirichlet nodes.
    pub fn gaussian(grid: &Grid, centers: &[f64], sigma: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::invalid("at least one actuator is required"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("actuator width must be positive, got {sigma}")));
        }
        let x = grid.nodes();
        let m = grid.m;
        let b = DMatrix::from_fn(m, centers.len(), |j, i| {
            if j == 0 || j == m - 1 {
                0.0
            } else {
                let d = x[j] - centers[i];
                (-d * d / (2.0 * sigma * sigma)).exp()
            }
        });
        Ok(ActuatorSet { centers: centers.to_vec(), sigma, b })
    }

    /// Centers 0.25, 0.5, 0.75 with σ = 0.05.
    pub fn bratu_default(grid: &Grid) -> Self {
        Self::gaussian(grid, &[0.25, 0.5, 0.75], 0.05).expect("default actuators are valid")
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// Spatial forcing `B z`.
    pub fn forcing(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.k() {
            return Err(Error::DimensionMismatch { context: "actuator input", expected: self.k(), found: z.len() });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("actuator input".into()));
        }
        Ok(&self.b * z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Lower,
    Upper,
}

fn check_state(values: &[f64], grid: &Grid) -> Result<()> {
    grid.check_len(values.len(), "plant state")?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("plant state".into()));
    }
    Ok(())
}

/// One explicit Euler substep written into `next`; boundary nodes stay at zero.
fn euler_substep(cur: &[f64], next: &mut [f64], lambda: f64, h2: f64, dt: f64, forcing: Option<&[f64]>) {
    let m = cur.len();
    next[0] = 0.0;
    next[m - 1] = 0.0;
    for j in 1..m - 1 {
        let lap = (cur[j - 1] - 2.0 * cur[j] + cur[j + 1]) / h2;
        let mut rhs = lap + lambda * cur[j].exp();
        if let Some(f) = forcing {
            rhs += f[j];
        }
        next[j] = cur[j] + dt * rhs;
    }
}

/// Runs all substeps of one reporting step on raw nodal values.
pub(crate) fn integrate(values: &[f64], cfg: &PlantConfig, forcing: Option<&[f64]>, substeps: usize) -> Vec<f64> {
    let h = cfg.grid.h();
    let mut cur = values.to_vec();
    let mut next = vec![0.0; cur.len()];
    for _ in 0..substeps {
        euler_substep(&cur, &mut next, cfg.lambda, h * h, cfg.dt_inner, forcing);
        std::mem::swap(&mut cur, &mut next);
    }
    if substeps == 0 {
        let last = cur.len() - 1;
        cur[0] = 0.0;
        cur[last] = 0.0;
    }
    cur
}

/// Semi-discrete right-hand side `u_xx + λ exp(u)` at interior nodes, zero on the boundary.
pub fn bratu_rhs(u: &Field, lambda: f64) -> Result<Field> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    let grid = *u.grid();
    let h = grid.h();
    let v = u.values();
    let m = grid.m;
    let out =
        DVector::from_fn(
            m,
            |j, _| {
                if j == 0 || j == m - 1 {
                    0.0
                } else {
                    (v[j - 1] - 2.0 * v[j] + v[j + 1]) / (h * h) + lambda * v[j].exp()
                }
            },
        );
    Field::new(grid, out)
}

/// A single forward-Euler substep `u + dt_inner (rhs(u) + forcing)` with the boundary re-clamped.
pub fn fd_step(u: &Field, cfg: &PlantConfig, forcing: &Field) -> Result<Field> {
    cfg.validate()?;
    u.same_grid(&cfg.grid)?;
    forcing.same_grid(&cfg.grid)?;
    let out = integrate(u.values().as_slice(), cfg, Some(forcing.values().as_slice()), 1);
    Field::new(cfg.grid, DVector::from_vec(out))
}

/// Uncontrolled reference flow over one reporting step.
pub fn fd_timestepper(u: &Field, cfg: &PlantConfig) -> Result<Field> {
    cfg.validate()?;
    u.same_grid(&cfg.grid)?;
    let out = integrate(u.values().as_slice(), cfg, None, cfg.substeps());
    Field::new(cfg.grid, DVector::from_vec(out))
}

/// Controlled reference flow with `B z` held constant over the whole reporting step.
pub fn controlled_fd_step(u: &Field, z: &DVector<f64>, act: &ActuatorSet, cfg: &PlantConfig) -> Result<Field> {
    cfg.validate()?;
    u.same_grid(&cfg.grid)?;
    let forcing = act.forcing(z)?;
    grid_matches_actuators(&cfg.grid, act)?;
    let out = integrate(u.values().as_slice(), cfg, Some(forcing.as_slice()), cfg.substeps());
    Field::new(cfg.grid, DVector::from_vec(out))
}

fn grid_matches_actuators(grid: &Grid, act: &ActuatorSet) -> Result<()> {
    if act.matrix().nrows() != grid.m {
        return Err(Error::DimensionMismatch { context: "actuator rows", expected: grid.m, found: act.matrix().nrows() });
    }
    Ok(())
}

/// The reference plant bundled with its actuators, usable as a black-box stepper.
#[derive(Debug, Clone)]
pub struct FdPlant {
    pub cfg: PlantConfig,
    pub actuators: ActuatorSet,
}

impl FdPlant {
    pub fn new(cfg: PlantConfig, actuators: ActuatorSet) -> Result<Self> {
        cfg.validate()?;
        grid_matches_actuators(&cfg.grid, &actuators)?;
        Ok(FdPlant { cfg, actuators })
    }

    pub fn bratu_default() -> Self {
        let cfg = PlantConfig::bratu_default();
        let actuators = ActuatorSet::bratu_default(&cfg.grid);
        FdPlant { cfg, actuators }
    }

    pub fn step_raw(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_state(u.as_slice(), &self.cfg.grid)?;
        Ok(DVector::from_vec(integrate(u.as_slice(), &self.cfg, None, self.cfg.substeps())))
    }

    pub fn step_controlled_raw(&self, u: &DVector<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_state(u.as_slice(), &self.cfg.grid)?;
        let forcing = self.actuators.forcing(z)?;
        Ok(DVector::from_vec(integrate(u.as_slice(), &self.cfg, Some(forcing.as_slice()), self.cfg.substeps())))
    }
}

impl crate::krylov::Stepper for FdPlant {
    fn dim(&self) -> usize {
        self.cfg.grid.m
    }
    fn step(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.step_raw(u)
    }
}

/// Roots of `cosh θ = 4θ / sqrt(2λ)`: the lower one below the tangency point, the upper one above it.
pub fn steady_state_theta(lambda: f64, branch: Branch) -> Result<f64> {
    if !(lambda > 0.0) || lambda >= LAMBDA_CRITICAL {
        return Err(Error::NoSteadyState { lambda, critical: LAMBDA_CRITICAL });
    }
    let slope = 4.0 / (2.0 * lambda).sqrt();
    let g = |t: f64| t.cosh() - slope * t;
    // g is convex with its minimum where sinh θ = slope.
    let tangency = slope.asinh();
    if g(tangency) >= 0.0 {
        return Err(Error::NoSteadyState { lambda, critical: LAMBDA_CRITICAL });
    }
    let (lo, hi) = match branch {
        Branch::Lower => (1e-6, tangency),
        Branch::Upper => {
            let mut hi = 10.0f64.max(2.0 * tangency);
            while g(hi) <= 0.0 && hi < 700.0 {
                hi *= 2.0;
            }
            (tangency, hi)
        }
    };
    bisect(g, lo, hi, 1e-14)
}

pub(crate) fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() || !flo.is_finite() || !fhi.is_finite() {
        return Err(Error::NotBracketed { lo, hi });
    }
    let lo_sign = flo.signum();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= tol || mid == lo || mid == hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == lo_sign {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Closed-form steady state `u(x) = 2 ln(cosh θ / cosh(θ(1 - 2x)))` on the unit interval.
pub fn analytic_steady_state(lambda: f64, branch: Branch, grid: &Grid) -> Result<(f64, Field)> {
    let theta = steady_state_theta(lambda, branch)?;
    let mut u = Field::from_fn(*grid, |x| {
        let s = (x - grid.x_lo) / (grid.x_hi - grid.x_lo);
        2.0 * (theta.cosh() / (theta * (1.0 - 2.0 * s)).cosh()).ln()
    })?;
    u.clamp_boundary();
    Ok((theta, u))
}

/// `u_ss · (1.2 + 0.4 sin(10πx) + 0.4 eˣ)`, the closed-loop test perturbation.
pub fn initial_perturbation(u_ss: &Field) -> Result<Field> {
    let grid = *u_ss.grid();
    let x = grid.nodes();
    let vals = DVector::from_fn(grid.m, |j, _| {
        let factor = 1.2 + 0.4 * (10.0 * std::f64::consts::PI * x[j]).sin() + 0.4 * x[j].exp();
        u_ss.values()[j] * factor
    });
    let mut out = Field::new(grid, vals)?;
    out.clamp_boundary();
    Ok(out)
}
