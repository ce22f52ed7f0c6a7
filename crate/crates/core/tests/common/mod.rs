#![allow(dead_code)]

use eqfree::krylov::{newton_krylov_fixed_point, NewtonOptions};
use eqfree::plant::{analytic_steady_state, ActuatorSet, Branch, FdPlant, PlantConfig};
use eqfree::{Field, Grid};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod oracles;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// FD plant on `m` nodes with the largest stable inner step that divides 1e-3.
pub fn fd_plant(m: usize) -> FdPlant {
    if m == 51 {
        return FdPlant::bratu_default();
    }
    let grid = Grid::unit(m).unwrap();
    let h2 = grid.h() * grid.h();
    let substeps = (1e-3 / (0.4 * h2)).ceil() as usize;
    let cfg = PlantConfig::new(2.0, 1e-3, 1e-3 / substeps as f64, grid).unwrap();
    let act = ActuatorSet::bratu_default(&cfg.grid);
    FdPlant::new(cfg, act).unwrap()
}

/// Newton-Krylov fixed point of the FD plant from 1.05 times the analytic upper state.
pub fn fd_steady_state(plant: &FdPlant) -> (DVector<f64>, Field) {
    let (_, analytic) = analytic_steady_state(2.0, Branch::Upper, &plant.cfg.grid).unwrap();
    let guess = analytic.values() * 1.05;
    let report = newton_krylov_fixed_point(plant, &guess, &NewtonOptions::default()).unwrap();
    (report.solution, analytic)
}

/// Exact Jacobian of one reporting step, propagated through every Euler substep.
pub fn exact_step_jacobian(plant: &FdPlant, u: &DVector<f64>) -> DMatrix<f64> {
    let m = u.len();
    let h2 = plant.cfg.grid.h().powi(2);
    let dt = plant.cfg.dt_inner;
    let lambda = plant.cfg.lambda;
    let mut cur = u.clone();
    let mut jac = DMatrix::<f64>::identity(m, m);
    for _ in 0..plant.cfg.substeps() {
        let mut js = DMatrix::zeros(m, m);
        let mut next = DVector::zeros(m);
        for j in 1..m - 1 {
            js[(j, j - 1)] = dt / h2;
            js[(j, j + 1)] = dt / h2;
            js[(j, j)] = 1.0 + dt * (-2.0 / h2 + lambda * cur[j].exp());
            next[j] = cur[j] + dt * ((cur[j - 1] - 2.0 * cur[j] + cur[j + 1]) / h2 + lambda * cur[j].exp());
        }
        jac = js * jac;
        cur = next;
    }
    jac
}
