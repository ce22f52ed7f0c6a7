mod common;

use common::oracles::{self, random_stable_poles, random_system};
use common::rng;
use eqfree::control::{closed_loop_eigs, dlqr_gain, pole_place, DareOptions, LqrSpec, PlaceOptions};
use eqfree::krylov::dense::multiset_distance;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn gmres_matches_dense_solve() {
    let worst = oracles::gmres_vs_dense();
    assert!(worst <= 1e-8, "worst relative gap {worst:e}");
}

#[test]
fn arnoldi_leading_ritz_matches_dense_eigenvalue() {
    let worst = oracles::arnoldi_vs_dense();
    assert!(worst <= 1e-8, "worst gap {worst:e}");
}

#[test]
fn dare_matches_value_iteration() {
    let s = oracles::dare_vs_value_iteration();
    assert!(s.scalar_p_gap <= 1e-10, "{s:?}");
    assert!(s.scalar_k_gap <= 1e-10, "{s:?}");
    assert!(s.residual <= 1e-10, "{s:?}");
    assert!(s.value_iteration_gap <= 1e-10, "{s:?}");
    assert!(s.worst_radius < 1.0, "{s:?}");
}

#[test]
fn pole_placement_matches_eigendecomposition() {
    let worst = oracles::placement_vs_eigendecomposition();
    assert!(worst <= 1e-6, "worst assignment error {worst:e}");
}

fn lqr_cost(f: &DMatrix<f64>, d: &DMatrix<f64>, spec: &LqrSpec, k: &DMatrix<f64>, y0: &DVector<f64>) -> f64 {
    let mut y = y0.clone();
    let mut cost = 0.0;
    for _ in 0..10_000 {
        let z = -(k * &y);
        cost += y.dot(&(&spec.q * &y)) + z.dot(&(&spec.r * &z));
        y = f * &y + d * z;
    }
    cost
}

#[test]
fn lqr_gain_beats_perturbed_gains() {
    for seed in 0..3 {
        let (f, d) = random_system(seed);
        let spec = LqrSpec::scaled_identity(5, 3, 1.0, 1.0).unwrap();
        let gain = dlqr_gain(&f, &d, &spec, &DareOptions::default()).unwrap();
        let mut r = rng(7000 + seed);
        let starts: Vec<DVector<f64>> = (0..10).map(|_| common::random_vector(&mut r, 5)).collect();
        let optimal: Vec<f64> = starts.iter().map(|y0| lqr_cost(&f, &d, &spec, &gain.k, y0)).collect();
        let p = gain.p.as_ref().unwrap();
        for (y0, c) in starts.iter().zip(&optimal) {
            let predicted = y0.dot(&(p * y0));
            assert!((c - predicted).abs() <= 1e-9 * predicted, "simulated {c} vs y0'Py0 {predicted}");
        }
        for _ in 0..20 {
            let dk = common::random_matrix(&mut r, 3, 5);
            let dk = dk.clone() * (1e-3 / dk.norm());
            let perturbed = &gain.k + dk;
            for (y0, c) in starts.iter().zip(&optimal) {
                let cp = lqr_cost(&f, &d, &spec, &perturbed, y0);
                assert!(cp >= c * (1.0 - 1e-12), "perturbed cost {cp} below optimal {c}");
            }
        }
    }
}

#[test]
fn stabilizing_gains_keep_dare_fixed_point() {
    let (f, d) = random_system(1);
    let spec = LqrSpec::scaled_identity(5, 3, 0.5, 1e-5).unwrap();
    let gain = dlqr_gain(&f, &d, &spec, &DareOptions::default()).unwrap();
    let p = gain.p.as_ref().unwrap();
    let next = oracles::riccati(&f, &d, &spec.q, &spec.r, p);
    assert!((&next - p).amax() <= 1e-10 * (1.0 + p.amax()));
    assert!(p.clone().symmetric_eigenvalues().min() >= -1e-10 * p.amax());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn complex_targets_give_real_gain_and_conjugate_spectrum(seed in 0u64..100_000) {
        let (f, d) = random_system(seed % 50);
        let mut r = rng(seed);
        let rho: f64 = r.random_range(0.1..0.9);
        let th: f64 = r.random_range(0.2..2.9);
        let mut poles = random_stable_poles(&mut r, 3);
        poles.push(num_complex::Complex64::from_polar(rho, th));
        poles.push(num_complex::Complex64::from_polar(rho, -th));
        let gain = pole_place(&f, &d, &poles, seed, &PlaceOptions::default()).unwrap();
        prop_assert!(gain.k.iter().all(|v| v.is_finite()));
        let eigs = closed_loop_eigs(&f, &d, &gain.k).unwrap();
        let conj: Vec<_> = eigs.iter().map(|v| v.conj()).collect();
        prop_assert!(multiset_distance(&eigs, &conj) <= 1e-8);
        prop_assert!(multiset_distance(&eigs, &poles) <= 1e-6);
    }

    #[test]
    fn dare_residual_small_on_scaled_systems(seed in 0u64..100_000, scale in 0.2f64..1.5, r_weight in 1e-4f64..10.0) {
        let mut r = rng(seed);
        let f = common::random_matrix(&mut r, 4, 4) * scale;
        let d = common::random_matrix(&mut r, 4, 2);
        let spec = LqrSpec::scaled_identity(4, 2, 1.0, r_weight).unwrap();
        let gain = dlqr_gain(&f, &d, &spec, &DareOptions::default()).unwrap();
        let p = gain.p.as_ref().unwrap();
        let next = oracles::riccati(&f, &d, &spec.q, &spec.r, p);
        prop_assert!((&next - p).amax() <= 1e-10 * (1.0 + p.amax()));
        prop_assert!(gain.spectral_radius() < 1.0);
    }
}
