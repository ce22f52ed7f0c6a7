mod common;

use common::{exact_step_jacobian, fd_plant, fd_steady_state};
use eqfree::control::{closed_loop_eigs, dare_residual, dlqr_gain, pole_place, DareOptions, LqrSpec, PlaceOptions};
use eqfree::krylov::dense::{eigenvalues, multiset_distance, real_eigenbasis};
use eqfree::krylov::Stepper;
use eqfree::plant::FdPlant;
use eqfree::reduction::{actuator_jacobian_fd, build_reduced_model, project, DMode, PlantKind, ReducedModel, ReductionOptions};
use eqfree::Field;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

const PAPER_POLES: [f64; 5] = [0.30, 0.425, 0.55, 0.675, 0.80];

fn fd_reduced(plant: &FdPlant, u_ss: &DVector<f64>, mode: DMode) -> ReducedModel {
    let opts = ReductionOptions { d_mode: mode, ..ReductionOptions::default() };
    let h = actuator_jacobian_fd(plant, u_ss, opts.h_eps).unwrap();
    build_reduced_model(plant, PlantKind::Fd, plant.cfg.grid, u_ss, h, Some(opts.h_eps), &opts).unwrap()
}

/// Discrete Duhamel sum: the exact derivative of one reporting step with respect to a held input.
fn duhamel_h(plant: &FdPlant, u: &DVector<f64>) -> DMatrix<f64> {
    let m = u.len();
    let h2 = plant.cfg.grid.h().powi(2);
    let dt = plant.cfg.dt_inner;
    let b = plant.actuators.matrix();
    let mut cur = u.clone();
    let mut sens = DMatrix::zeros(m, b.ncols());
    for _ in 0..plant.cfg.substeps() {
        let mut next = DVector::zeros(m);
        let mut js = DMatrix::zeros(m, m);
        for j in 1..m - 1 {
            js[(j, j - 1)] = dt / h2;
            js[(j, j + 1)] = dt / h2;
            js[(j, j)] = 1.0 + dt * (-2.0 / h2 + plant.cfg.lambda * cur[j].exp());
            next[j] = cur[j] + dt * ((cur[j - 1] - 2.0 * cur[j] + cur[j + 1]) / h2 + plant.cfg.lambda * cur[j].exp());
        }
        let mut forced = b * dt;
        forced.row_mut(0).fill(0.0);
        forced.row_mut(m - 1).fill(0.0);
        sens = js * sens + forced;
        cur = next;
    }
    sens
}

#[test]
fn actuator_jacobian_matches_duhamel_sum() {
    let plant = fd_plant(51);
    let (u, _) = fd_steady_state(&plant);
    let h = actuator_jacobian_fd(&plant, &u, 1e-4).unwrap();
    let exact = duhamel_h(&plant, &u);
    let rel = (&h - &exact).amax() / exact.amax();
    assert!(rel <= 1e-6, "relative H error {rel:e}");
}

#[test]
fn actuator_jacobian_is_insensitive_to_eps() {
    let plant = fd_plant(51);
    let (u, _) = fd_steady_state(&plant);
    let h1 = actuator_jacobian_fd(&plant, &u, 1e-4).unwrap();
    let h2 = actuator_jacobian_fd(&plant, &u, 2e-4).unwrap();
    let rel = (&h1 - &h2).amax() / h1.amax();
    assert!(rel < 1e-6, "relative change {rel:e}");

    let coarse = actuator_jacobian_fd(&plant, &u, 1e-2).unwrap();
    let mid = actuator_jacobian_fd(&plant, &u, 5e-3).unwrap();
    let fine = actuator_jacobian_fd(&plant, &u, 2.5e-3).unwrap();
    let ratio = (&coarse - &mid).amax() / (&mid - &fine).amax();
    assert!((1.8..2.2).contains(&ratio), "one-sided difference convergence ratio {ratio}");
}

#[test]
fn actuator_jacobian_second_order_duhamel() {
    let plant = fd_plant(51);
    let (u, _) = fd_steady_state(&plant);
    let dt = plant.cfg.dt_report;
    let h = actuator_jacobian_fd(&plant, &u, 1e-4).unwrap();
    let b = plant.actuators.matrix();
    let jac = exact_step_jacobian(&plant, &u);
    // J = I + dt A + O(dt^2) gives dt A from the exact Jacobian.
    let a_dt = &jac - DMatrix::<f64>::identity(51, 51);
    let second = b * dt + &a_dt * b * (dt / 2.0);
    let first_gap = (&h - b * dt).amax() / (dt * b.amax());
    let second_gap = (&h - second).amax() / (dt * b.amax());
    assert!(second_gap < 0.5 * first_gap, "second-order gap {second_gap} vs first-order {first_gap}");
    assert!(second_gap <= 0.1, "second-order gap {second_gap}");
}

#[test]
#[ignore = "first-order bound is not attained at these actuator widths; see the decisions ledger"]
fn actuator_jacobian_first_order_bound() {
    let plant = fd_plant(51);
    let (u, _) = fd_steady_state(&plant);
    let dt = plant.cfg.dt_report;
    let h = actuator_jacobian_fd(&plant, &u, 1e-4).unwrap();
    let b = plant.actuators.matrix();
    let gap = (&h - b * dt).amax() / (dt * b.amax());
    assert!(gap <= 0.1, "||H - dt B||_max / (dt ||B||_max) = {gap}");
}

#[test]
fn reduced_model_matches_arnoldi_and_spans_invariant_subspace() {
    let plant = fd_plant(51);
    let (u, _) = fd_steady_state(&plant);
    let model = fd_reduced(&plant, &u, DMode::Consistent);
    assert_eq!(model.m_slow(), 5);
    let ortho = (model.v.transpose() * &model.v - DMatrix::<f64>::identity(5, 5)).amax();
    assert!(ortho <= 1e-10);

    let eig_f = eigenvalues(&model.f);
    let ritz = &model.provenance.ritz_values[..5];
    assert!(multiset_distance(&eig_f, ritz) <= 1e-6, "eig(F) {eig_f:?} vs Ritz {ritz:?}");

    let jac = exact_step_jacobian(&plant, &u);
    let jv = &jac * &model.v;
    let residual = (&jv - &model.v * (model.v.transpose() * &jv)).norm();
    assert!(residual <= 1e-5, "subspace residual {residual:e}");

    let d = model.v.transpose() * &model.h;
    assert!((&d - &model.d).amax() <= 1e-15 * (1.0 + d.amax()));
}

#[test]
fn one_step_reduced_consistency() {
    let plant = fd_plant(51);
    let (u, _) = fd_steady_state(&plant);
    let model = fd_reduced(&plant, &u, DMode::Consistent);
    let grid = plant.cfg.grid;
    let mut rng = common::rng(11);
    let dir = common::random_vector(&mut rng, 5).normalize();
    let mut ratios = Vec::new();
    for scale in [1e-3, 5e-4, 2.5e-4, 1e-4] {
        let delta = &model.v * &dir * scale;
        let u1 = &u + &delta;
        let y = project(&Field::new(grid, u1.clone()).unwrap(), &model).unwrap();
        let next = plant.step(&u1).unwrap();
        let y_next = project(&Field::new(grid, next).unwrap(), &model).unwrap();
        let err = (y_next - &model.f * y).norm();
        ratios.push(err / (scale * scale));
        assert!(err <= 10.0 * scale * scale + 1e-7 * scale, "scale {scale:e}: error {err:e}");
    }
    let spread = ratios.iter().cloned().fold(0.0, f64::max) / ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(spread < 2.0, "error / |delta|^2 not constant: {ratios:?}");
}

#[test]
fn paper_pole_placement_on_fd_model_and_lifted_system() {
    let plant = fd_plant(51);
    let (u, _) = fd_steady_state(&plant);
    let model = fd_reduced(&plant, &u, DMode::Consistent);
    let poles: Vec<Complex64> = PAPER_POLES.iter().map(|&p| Complex64::new(p, 0.0)).collect();
    let gain = pole_place(&model.f, &model.d, &poles, 0, &PlaceOptions::default()).unwrap();
    let eigs = closed_loop_eigs(&model.f, &model.d, &gain.k).unwrap();
    assert!(multiset_distance(&eigs, &poles) <= 1e-8, "closed loop {eigs:?}");

    // Linearized lifted loop u -> J u - H K V^T u keeps the placed poles and nothing unstable.
    let jac = exact_step_jacobian(&plant, &u);
    let lifted = &jac - &model.h * &gain.k * model.v.transpose();
    let full = eigenvalues(&lifted);
    assert!(full[0].norm() < 1.0, "lifted spectral radius {}", full[0].norm());
    for p in &poles {
        let nearest = full.iter().map(|m| (m - p).norm()).fold(f64::INFINITY, f64::min);
        assert!(nearest <= 1e-5, "pole {p} missing from the lifted spectrum (nearest {nearest:e})");
    }
}

#[test]
fn paper_dlqr_weights_stabilize_fd_model() {
    let plant = fd_plant(51);
    let (u, _) = fd_steady_state(&plant);
    let model = fd_reduced(&plant, &u, DMode::Consistent);
    let dt = plant.cfg.dt_report;
    let spec = LqrSpec::scaled_identity(5, 3, 0.5, 10.0 * dt * dt).unwrap();
    let gain = dlqr_gain(&model.f, &model.d, &spec, &DareOptions::default()).unwrap();
    assert!(gain.spectral_radius() < 1.0);
    let p = gain.p.as_ref().unwrap();
    let res = dare_residual(&model.f, &model.d, &spec, p).unwrap();
    assert!(res <= 1e-10 * (1.0 + p.amax()), "DARE residual {res:e}");
}

#[test]
fn paper_vf_mode_on_nearly_diagonal_f() {
    let plant = fd_plant(51);
    let (u, _) = fd_steady_state(&plant);
    let consistent = fd_reduced(&plant, &u, DMode::Consistent);
    let vf = fd_reduced(&plant, &u, DMode::PaperVf);
    assert_eq!(vf.d_mode, DMode::PaperVf);
    assert_eq!(vf.f, consistent.f);
    let basis = real_eigenbasis(&vf.f, &eigenvalues(&vf.f)).unwrap();
    assert!((&basis * &consistent.d - &vf.d).amax() <= 1e-12 * vf.d.amax());
    // Ritz-vector coordinates make F nearly diagonal, so the two modes agree up to column signs.
    let off_diag = (&vf.f - DMatrix::from_diagonal(&vf.f.diagonal())).amax();
    assert!(off_diag <= 1e-6, "off-diagonal of F {off_diag:e}");
    let abs_gap = (vf.d.abs() - consistent.d.abs()).amax();
    assert!(abs_gap <= 1e-6 * consistent.d.amax(), "|D| gap {abs_gap:e}");
}

#[test]
fn fd_reduction_is_deterministic() {
    let plant = fd_plant(51);
    let (u, _) = fd_steady_state(&plant);
    let a = fd_reduced(&plant, &u, DMode::Consistent);
    let b = fd_reduced(&plant, &u, DMode::Consistent);
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}
