//! Seeded oracle comparisons shared by the solver tests and the acceptance run.

use eqfree::control::{dlqr_gain, pole_place, DareOptions, LqrSpec, PlaceOptions};
use eqfree::krylov::dense::{eigenvalues, multiset_distance};
use eqfree::krylov::{arnoldi, gmres, GmresOptions};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use super::{random_matrix, random_vector, rng};

pub const SEEDS: u64 = 50;

/// Worst relative gap between GMRES and a dense LU solve on 30×30 systems.
pub fn gmres_vs_dense() -> f64 {
    let opts = GmresOptions { tol: 1e-13, restart: 50, maxiter: 200 };
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut r = rng(1000 + seed);
        let a = DMatrix::<f64>::identity(30, 30) * 3.0 + random_matrix(&mut r, 30, 30) / (30f64).sqrt();
        let b = random_vector(&mut r, 30);
        let report = gmres(&a, &b, &nalgebra::DVector::zeros(30), &opts).unwrap();
        assert!(report.converged, "seed {seed}: gmres did not converge");
        let direct = a.clone().lu().solve(&b).unwrap();
        worst = worst.max((&report.x - &direct).norm() / direct.norm());
    }
    worst
}

/// 50×50 matrix with eigenvalue 10 and the rest of modulus at most one, in a random orthogonal basis.
pub fn dominant_matrix(seed: u64) -> DMatrix<f64> {
    let mut r = rng(2000 + seed);
    let n = 50;
    let mut core = DMatrix::zeros(n, n);
    core[(0, 0)] = 10.0;
    let mut i = 1;
    while i < n {
        if i + 1 < n && r.random_bool(0.3) {
            let rho: f64 = r.random_range(0.0..1.0);
            let th: f64 = r.random_range(0.0..std::f64::consts::PI);
            core[(i, i)] = rho * th.cos();
            core[(i, i + 1)] = -rho * th.sin();
            core[(i + 1, i)] = rho * th.sin();
            core[(i + 1, i + 1)] = rho * th.cos();
            i += 2;
        } else {
            core[(i, i)] = r.random_range(-1.0..1.0);
            i += 1;
        }
    }
    let q = random_matrix(&mut r, n, n).qr().q();
    &q * core * q.transpose()
}

/// Worst gap between the leading Ritz value (m_k = 8) and the dense leading eigenvalue.
pub fn arnoldi_vs_dense() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let a = dominant_matrix(seed);
        let mut r = rng(3000 + seed);
        let ar = arnoldi(&a, &random_vector(&mut r, 50), 8).unwrap();
        let dense = eigenvalues(&a)[0];
        worst = worst.max((ar.ritz_values[0] - dense).norm());
    }
    worst
}

/// Independent Riccati map with an explicit inverse.
pub fn riccati(f: &DMatrix<f64>, d: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let s = r + d.transpose() * p * d;
    let s_inv = s.try_inverse().unwrap();
    let next = f.transpose() * p * f - f.transpose() * p * d * s_inv * d.transpose() * p * f + q;
    (&next + next.transpose()) * 0.5
}

/// `steps` rounds of value iteration from `P = 0`.
pub fn value_iteration(f: &DMatrix<f64>, d: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, steps: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(f.nrows(), f.nrows());
    for _ in 0..steps {
        p = riccati(f, d, q, r, &p);
    }
    p
}

pub fn random_system(seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut r = rng(4000 + seed);
    (random_matrix(&mut r, 5, 5) * 0.8, random_matrix(&mut r, 5, 3))
}

#[derive(Debug, Default)]
pub struct DareStats {
    pub scalar_p_gap: f64,
    pub scalar_k_gap: f64,
    /// Largest `||P - Ric(P)||_max / (1 + ||P||_max)` over the random systems.
    pub residual: f64,
    pub value_iteration_gap: f64,
    pub worst_radius: f64,
}

pub fn dare_vs_value_iteration() -> DareStats {
    let opts = DareOptions::default();
    let mut stats = DareStats::default();

    let one = DMatrix::from_element(1, 1, 1.0);
    let half = DMatrix::from_element(1, 1, 0.5);
    let spec = LqrSpec::new(one.clone(), one.clone()).unwrap();
    let gain = dlqr_gain(&half, &one, &spec, &opts).unwrap();
    let p_exact = (0.25 + 4.0625f64.sqrt()) / 2.0;
    let p_vi = value_iteration(&half, &one, &one, &one, 10_000)[(0, 0)];
    let p = gain.p.as_ref().unwrap()[(0, 0)];
    stats.scalar_p_gap = (p - p_exact).abs().max((p - p_vi).abs());
    stats.scalar_k_gap = (gain.k[(0, 0)] - p_vi * 0.5 / (1.0 + p_vi)).abs();

    for seed in 0..SEEDS {
        let (f, d) = random_system(seed);
        let mut r = rng(5000 + seed);
        let l = random_matrix(&mut r, 5, 5);
        let q = &l * l.transpose() * 0.5;
        let w = random_matrix(&mut r, 3, 3);
        let rw = &w * w.transpose() + DMatrix::identity(3, 3);
        let q = (&q + q.transpose()) * 0.5;
        let rw = (&rw + rw.transpose()) * 0.5;
        let spec = LqrSpec::new(q.clone(), rw.clone()).unwrap();
        let gain = dlqr_gain(&f, &d, &spec, &opts).unwrap();
        let p = gain.p.as_ref().unwrap();
        let res = (p - riccati(&f, &d, &q, &rw, p)).amax() / (1.0 + p.amax());
        let vi = value_iteration(&f, &d, &q, &rw, 10_000);
        stats.residual = stats.residual.max(res);
        stats.value_iteration_gap = stats.value_iteration_gap.max((p - vi).amax() / (1.0 + p.amax()));
        stats.worst_radius = stats.worst_radius.max(gain.spectral_radius());
    }
    stats
}

/// Conjugate-closed set of `n` distinct poles inside the unit disc.
pub fn random_stable_poles(r: &mut impl Rng, n: usize) -> Vec<Complex64> {
    let mut poles = Vec::with_capacity(n);
    while poles.len() < n {
        if poles.len() + 1 < n && r.random_bool(0.4) {
            let rho: f64 = r.random_range(0.05..0.95);
            let th: f64 = r.random_range(0.1..3.0);
            poles.push(Complex64::from_polar(rho, th));
            poles.push(Complex64::from_polar(rho, -th));
        } else {
            poles.push(Complex64::new(r.random_range(-0.95..0.95), 0.0));
        }
    }
    poles
}

/// Worst multiset gap between eig(F - DK) and the requested poles.
pub fn placement_vs_eigendecomposition() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let (f, d) = random_system(seed);
        let mut r = rng(6000 + seed);
        let poles = random_stable_poles(&mut r, 5);
        let gain = pole_place(&f, &d, &poles, seed, &PlaceOptions::default()).unwrap();
        let eigs = eigenvalues(&(&f - &d * &gain.k));
        worst = worst.max(multiset_distance(&eigs, &poles));
    }
    worst
}
