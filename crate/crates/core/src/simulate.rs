//! Closed- and open-loop rollouts with the lifted feedback `z = -K Vᵀ(u - u_ss)`.

use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::control::{ControlMethod, ControllerGain};
use crate::error::{Error, Result};
use crate::field::Grid;
use crate::io::fmt_f64;
use crate::plant::{ActuatorSet, FdPlant};
use crate::randonet::RandONetModel;
use crate::reduction::{PlantKind, ReducedModel};

/// States with a sup-norm above this end the rollout.
pub const DIVERGENCE_BOUND: f64 = 1e3;

/// A timestepper that accepts a held control input.
#[derive(Debug, Clone, Copy)]
pub enum ControlledPlant<'a> {
    Fd(&'a FdPlant),
    /// `u ↦ S(u) + B z` with the Dirichlet nodes clamped.
    Surrogate {
        model: &'a RandONetModel,
        actuators: &'a ActuatorSet,
    },
}

impl ControlledPlant<'_> {
    pub fn kind(&self) -> PlantKind {
        match self {
            ControlledPlant::Fd(_) => PlantKind::Fd,
            ControlledPlant::Surrogate { .. } => PlantKind::Surrogate,
        }
    }

    pub fn grid(&self) -> Grid {
        match self {
            ControlledPlant::Fd(p) => p.cfg.grid,
            ControlledPlant::Surrogate { model, .. } => model.grid,
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            ControlledPlant::Fd(p) => p.cfg.dt_report,
            ControlledPlant::Surrogate { model, .. } => model.dt_report,
        }
    }

    pub fn actuators(&self) -> &ActuatorSet {
        match self {
            ControlledPlant::Fd(p) => &p.actuators,
            ControlledPlant::Surrogate { actuators, .. } => actuators,
        }
    }

    pub fn step(&self, u: &DVector<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            ControlledPlant::Fd(p) => p.step_controlled_raw(u, z),
            ControlledPlant::Surrogate { model, actuators } => {
                let mut next = model.predict_raw(u)? + actuators.forcing(z)?;
                let last = next.len() - 1;
                next[0] = 0.0;
                next[last] = 0.0;
                Ok(next)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub steps: usize,
    /// Keep every n-th state; 0 keeps none.
    pub snapshot_every: usize,
    /// Permit a gain or reduced model designed on the other plant.
    pub allow_mismatch: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { steps: 5000, snapshot_every: 10, allow_mismatch: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub plant: PlantKind,
    /// `None` for open-loop runs.
    pub controller: Option<ControlMethod>,
    pub dt: f64,
    pub times: Vec<f64>,
    /// `||u_n - u_ss||_2` on the nodal values.
    pub l2_error: Vec<f64>,
    /// Control `z_n` computed from `u_n`; zero in open loop.
    pub controls: Vec<DVector<f64>>,
    /// `max_j |(B z_n)_j|`.
    pub bz_absmax: Vec<f64>,
    pub snapshots: Vec<(usize, DVector<f64>)>,
    pub diverged: bool,
}

impl ClosedLoopTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_error(&self) -> f64 {
        self.l2_error.last().copied().unwrap_or(f64::NAN)
    }

    /// First step whose error is at or below `level`.
    pub fn first_below(&self, level: f64) -> Option<usize> {
        self.l2_error.iter().position(|&e| e <= level)
    }

    /// Largest increase between consecutive errors over the last `fraction` of the trace.
    pub fn tail_max_increase(&self, fraction: f64) -> f64 {
        let n = self.l2_error.len();
        let start = n - ((n as f64 * fraction).ceil() as usize).min(n);
        self.l2_error[start..].windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.times.len();
        if self.l2_error.len() != n || self.controls.len() != n || self.bz_absmax.len() != n {
            return Err(Error::invalid("trace columns have different lengths"));
        }
        if self.l2_error.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::invalid("trace has a negative or NaN error"));
        }
        Ok(())
    }

    /// `t,l2_error,z_1..z_k,bz_absmax`, one row per outer step.
    pub fn to_csv(&self) -> String {
        let k = self.controls.first().map_or(0, |z| z.len());
        let mut out = String::from("t,l2_error");
        for i in 1..=k {
            let _ = write!(out, ",z_{i}");
        }
        out.push_str(",bz_absmax\n");
        for n in 0..self.times.len() {
            out.push_str(&fmt_f64(self.times[n]));
            out.push(',');
            out.push_str(&fmt_f64(self.l2_error[n]));
            for z in self.controls[n].iter() {
                out.push(',');
                out.push_str(&fmt_f64(*z));
            }
            out.push(',');
            out.push_str(&fmt_f64(self.bz_absmax[n]));
            out.push('\n');
        }
        out
    }

    /// `step,t,u_0..u_{m-1}` for the decimated states.
    pub fn snapshots_csv(&self) -> String {
        let m = self.snapshots.first().map_or(0, |(_, u)| u.len());
        let mut out = String::from("step,t");
        for j in 0..m {
            let _ = write!(out, ",u_{j}");
        }
        out.push('\n');
        for (n, u) in &self.snapshots {
            let _ = write!(out, "{n},{}", fmt_f64(self.times[*n]));
            for v in u.iter() {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }
}

fn check_pairing(plant: &ControlledPlant, reduced: &ReducedModel, gain: &ControllerGain, allow_mismatch: bool) -> Result<()> {
    reduced.validate()?;
    if reduced.grid != plant.grid() {
        return Err(Error::GridMismatch(format!("reduced model grid {:?} vs plant grid {:?}", reduced.grid, plant.grid())));
    }
    if reduced.k() != plant.actuators().k() {
        return Err(Error::DimensionMismatch { context: "actuator count", expected: plant.actuators().k(), found: reduced.k() });
    }
    if gain.k.shape() != (reduced.k(), reduced.m_slow()) {
        return Err(Error::invalid(format!(
            "gain is {}x{} but the reduced model needs {}x{}",
            gain.k.nrows(),
            gain.k.ncols(),
            reduced.k(),
            reduced.m_slow()
        )));
    }
    let kind = plant.kind();
    let designed = [Some(reduced.provenance.plant), gain.plant];
    if !allow_mismatch && designed.iter().flatten().any(|p| *p != kind) {
        return Err(Error::invalid(format!(
            "reduced model ({}) or gain ({}) was built for another plant than {kind}; pass allow_mismatch to run anyway",
            reduced.provenance.plant,
            gain.plant.map_or("unknown".to_string(), |p| p.to_string())
        )));
    }
    Ok(())
}

fn rollout(
    plant: &ControlledPlant,
    u_ss: &DVector<f64>,
    u0: &DVector<f64>,
    opts: &SimOptions,
    controller: Option<ControlMethod>,
    mut law: impl FnMut(&DVector<f64>) -> DVector<f64>,
) -> Result<ClosedLoopTrace> {
    plant.grid().check_len(u0.len(), "initial state")?;
    if u0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    let dt = plant.dt();
    let b = plant.actuators().matrix();
    let cap = opts.steps + 1;
    let mut trace = ClosedLoopTrace {
        plant: plant.kind(),
        controller,
        dt,
        times: Vec::with_capacity(cap),
        l2_error: Vec::with_capacity(cap),
        controls: Vec::with_capacity(cap),
        bz_absmax: Vec::with_capacity(cap),
        snapshots: Vec::new(),
        diverged: false,
    };
    let mut u = u0.clone();
    for n in 0..=opts.steps {
        let z = law(&u);
        trace.times.push(n as f64 * dt);
        trace.l2_error.push((&u - u_ss).norm());
        trace.bz_absmax.push((b * &z).amax());
        trace.controls.push(z.clone());
        if opts.snapshot_every > 0 && n % opts.snapshot_every == 0 {
            trace.snapshots.push((n, u.clone()));
        }
        if n == opts.steps {
            break;
        }
        let next = match plant.step(&u, &z) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => {
                trace.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if next.iter().any(|v| !(v.abs() <= DIVERGENCE_BOUND)) {
            log::warn!("{} rollout left |u| <= {DIVERGENCE_BOUND:e} at step {}", plant.kind(), n + 1);
            trace.diverged = true;
            break;
        }
        u = next;
    }
    Ok(trace)
}

/// Feedback `z_n = -K Vᵀ(u_n - u_ss)` applied to the full nonlinear plant.
pub fn run_closed_loop(
    plant: &ControlledPlant,
    reduced: &ReducedModel,
    gain: &ControllerGain,
    u0: &DVector<f64>,
    opts: &SimOptions,
) -> Result<ClosedLoopTrace> {
    check_pairing(plant, reduced, gain, opts.allow_mismatch)?;
    let kv = &gain.k * reduced.v.transpose();
    rollout(plant, &reduced.u_ss, u0, opts, Some(gain.method), |u| -(&kv * (u - &reduced.u_ss)))
}

/// Uncontrolled rollout, errors measured against `u_ss`.
pub fn run_open_loop(plant: &ControlledPlant, u_ss: &DVector<f64>, u0: &DVector<f64>, opts: &SimOptions) -> Result<ClosedLoopTrace> {
    plant.grid().check_len(u_ss.len(), "steady state")?;
    let k = plant.actuators().k();
    rollout(plant, u_ss, u0, opts, None, |_| DVector::zeros(k))
}
