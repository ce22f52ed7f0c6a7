mod common;

use common::{exact_step_jacobian, fd_plant, fd_steady_state};
use eqfree::krylov::dense::eigenvalues;
use eqfree::krylov::{arnoldi, assemble_dense, jvp, EpsRule, JacobianOperator, LinearOperator, NewtonOptions, Stepper};
use eqfree::plant::{analytic_steady_state, Branch, FdPlant, PlantConfig};
use eqfree::reduction::start_vector;
use eqfree::Grid;
use nalgebra::DVector;
use proptest::prelude::*;

#[test]
fn newton_fixed_point_matches_analytic_state() {
    let plant = fd_plant(51);
    let (u, analytic) = fd_steady_state(&plant);
    let h = plant.cfg.grid.h();
    let psi = (&u - plant.step(&u).unwrap()).norm();
    assert!(psi <= 1e-12, "fixed-point residual {psi:e}");
    let gap = (&u - analytic.values()).amax();
    assert!(gap <= 5.0 * h * h, "analytic gap {gap:e}");
    let drift = (plant.step(&u).unwrap() - &u).amax();
    assert!(drift <= 1e-10, "one-step drift {drift:e}");
}

#[test]
fn analytic_gap_is_second_order_in_h() {
    let coarse = fd_plant(51);
    let fine = fd_plant(101);
    let (uc, ac) = fd_steady_state(&coarse);
    let (uf, af) = fd_steady_state(&fine);
    let ratio = (&uc - ac.values()).amax() / (&uf - af.values()).amax();
    assert!((3.5..4.5).contains(&ratio), "gap ratio under h-halving {ratio}");
}

#[test]
fn newton_tail_is_superlinear() {
    let plant = fd_plant(51);
    let (_, analytic) = analytic_steady_state(2.0, Branch::Upper, &plant.cfg.grid).unwrap();
    let guess = analytic.values() * 1.05;
    let report = eqfree::krylov::newton_krylov_fixed_point(&plant, &guess, &NewtonOptions::default()).unwrap();
    let r = &report.residual_history;
    let mut checked = 0;
    for w in r.windows(2) {
        if w[0] < 1e-4 && w[1] > 1e-12 {
            assert!(w[1] <= 10.0 * w[0].powf(1.5), "residual {:e} after {:e}", w[1], w[0]);
            checked += 1;
        }
    }
    assert!(checked >= 1, "no tail iterate to check in {r:?}");
}

#[test]
fn euler_step_is_first_order_in_the_inner_step() {
    let grid = Grid::unit(51).unwrap();
    let (_, analytic) = analytic_steady_state(2.0, Branch::Upper, &grid).unwrap();
    let u0 = DVector::from_fn(51, |i, _| {
        let x = grid.node(i);
        0.8 * analytic.values()[i] + 0.3 * (std::f64::consts::PI * x).sin()
    });
    let step = |dt_inner: f64| {
        let cfg = PlantConfig::new(2.0, 1e-3, dt_inner, grid).unwrap();
        let act = eqfree::plant::ActuatorSet::bratu_default(&grid);
        FdPlant::new(cfg, act).unwrap().step(&u0).unwrap()
    };
    let reference = step(1.25e-5);
    let e1 = (step(1e-4) - &reference).norm();
    let e2 = (step(5e-5) - &reference).norm();
    let ratio = e1 / e2;
    assert!((1.7..2.7).contains(&ratio), "error ratio {ratio} ({e1:e} / {e2:e})");
}

#[test]
fn jvp_matches_exact_jacobian() {
    let plant = fd_plant(51);
    let (u, _) = fd_steady_state(&plant);
    let exact = exact_step_jacobian(&plant, &u);
    let op = JacobianOperator::new(&plant, u.clone(), EpsRule::Scaled).unwrap();
    let dense = assemble_dense(&op).unwrap();
    let rel = (&dense - &exact).norm() / exact.norm();
    assert!(rel <= 1e-6, "relative Jacobian error {rel:e}");

    let mut rng = common::rng(3);
    for _ in 0..5 {
        let v = common::random_vector(&mut rng, 51);
        let jv = jvp(&plant, &u, &v, EpsRule::Scaled).unwrap();
        let want = &exact * &v;
        assert!((&jv - &want).norm() <= 1e-6 * want.norm());
    }
}

#[test]
fn jvp_is_robust_to_halving_the_increment() {
    let plant = fd_plant(51);
    let (u, _) = fd_steady_state(&plant);
    let eps = EpsRule::Scaled.epsilon(&u);
    let mut rng = common::rng(5);
    for _ in 0..5 {
        let v = common::random_vector(&mut rng, 51);
        let a = jvp(&plant, &u, &v, EpsRule::Fixed(eps)).unwrap();
        let b = jvp(&plant, &u, &v, EpsRule::Fixed(eps / 2.0)).unwrap();
        let rel = (&a - &b).norm() / a.norm();
        assert!(rel < 1e-5, "relative change {rel:e}");
    }
}

#[test]
fn arnoldi_on_bratu_jacobian() {
    let plant = fd_plant(51);
    let (u, _) = fd_steady_state(&plant);
    let op = JacobianOperator::new(&plant, u.clone(), EpsRule::Scaled).unwrap();
    let ar = arnoldi(&op, &start_vector(51, 1), 40).unwrap();

    let unstable = ar.ritz_values.iter().filter(|m| m.norm() > 1.0).count();
    assert_eq!(unstable, 1, "Ritz values {:?}", &ar.ritz_values[..6]);

    let q = &ar.q;
    let ortho = (q.transpose() * q - nalgebra::DMatrix::<f64>::identity(q.ncols(), q.ncols())).amax();
    assert!(ortho <= 1e-10, "orthogonality loss {ortho:e}");
    for j in 0..ar.steps {
        for i in j + 2..ar.h.nrows() {
            assert_eq!(ar.h[(i, j)], 0.0);
        }
    }
    let mut aq = nalgebra::DMatrix::zeros(51, ar.steps);
    for j in 0..ar.steps {
        aq.set_column(j, &op.apply(&q.column(j).into_owned()).unwrap());
    }
    let relation = (aq - q * &ar.h).norm() / ar.h.norm();
    assert!(relation <= 1e-8, "Arnoldi relation {relation:e}");

    let exact = eigenvalues(&exact_step_jacobian(&plant, &u));
    for (mu, lam) in ar.ritz_values.iter().zip(&exact).take(5) {
        assert!((mu - lam).norm() <= 1e-6, "Ritz {mu} vs eigenvalue {lam}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn controlled_steps_keep_dirichlet_boundary(
        interior in proptest::collection::vec(-1.0f64..3.0, 49),
        z in proptest::collection::vec(-50.0f64..50.0, 3),
    ) {
        let plant = FdPlant::bratu_default();
        let mut u = vec![0.0];
        u.extend(interior);
        u.push(0.0);
        let out = plant.step_controlled_raw(&DVector::from_vec(u), &DVector::from_vec(z)).unwrap();
        prop_assert_eq!(out[0], 0.0);
        prop_assert_eq!(out[50], 0.0);
    }
}
