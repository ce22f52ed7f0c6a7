use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{ensure_finite, LinearOperator, Stepper};
use crate::error::{Error, Result};

/// How the finite-difference increment is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum EpsRule {
    /// `sqrt(machine eps) * (1 + ||u||_2)`.
    #[default]
    Scaled,
    Fixed(f64),
    /// Scaled increment with a central difference; diagnostics only.
    Central,
}

impl EpsRule {
    pub fn epsilon(&self, u: &DVector<f64>) -> f64 {
        match *self {
            EpsRule::Scaled | EpsRule::Central => f64::EPSILON.sqrt() * (1.0 + u.norm()),
            EpsRule::Fixed(e) => e,
        }
    }
}

/// Directional derivative `J(u) v` from a one-sided difference along `v / ||v||`.
pub fn jvp(stepper: &impl Stepper, u: &DVector<f64>, v: &DVector<f64>, rule: EpsRule) -> Result<DVector<f64>> {
    let su = stepper.step(u)?;
    jvp_with_base(stepper, u, &su, v, rule)
}

pub(crate) fn jvp_with_base(
    stepper: &impl Stepper,
    u: &DVector<f64>,
    su: &DVector<f64>,
    v: &DVector<f64>,
    rule: EpsRule,
) -> Result<DVector<f64>> {
    if v.len() != u.len() {
        return Err(Error::DimensionMismatch { context: "jvp direction", expected: u.len(), found: v.len() });
    }
    let vnorm = v.norm();
    if vnorm == 0.0 {
        return Err(Error::invalid("jvp direction must be nonzero"));
    }
    let eps = rule.epsilon(u);
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("jvp increment must be positive, got {eps}")));
    }
    let dir = v / vnorm;
    let forward = stepper.step(&(u + &dir * eps))?;
    ensure_finite(&forward, "stepper output during jvp")?;
    let out = match rule {
        EpsRule::Central => {
            let backward = stepper.step(&(u - &dir * eps))?;
            ensure_finite(&backward, "stepper output during jvp")?;
            (forward - backward) * (vnorm / (2.0 * eps))
        }
        _ => (forward - su) * (vnorm / eps),
    };
    Ok(out)
}

/// Matrix-free Jacobian of a stepper at a fixed base point.
pub struct JacobianOperator<S> {
    stepper: S,
    u: DVector<f64>,
    su: DVector<f64>,
    rule: EpsRule,
}

impl<S: Stepper> JacobianOperator<S> {
    pub fn new(stepper: S, u: DVector<f64>, rule: EpsRule) -> Result<Self> {
        let su = stepper.step(&u)?;
        ensure_finite(&su, "stepper output at linearization point")?;
        Ok(JacobianOperator { stepper, u, su, rule })
    }

    pub fn base_image(&self) -> &DVector<f64> {
        &self.su
    }
}

impl<S: Stepper> LinearOperator for JacobianOperator<S> {
    fn dim(&self) -> usize {
        self.u.len()
    }
    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.iter().all(|&x| x == 0.0) {
            return Ok(DVector::zeros(v.len()));
        }
        jvp_with_base(&self.stepper, &self.u, &self.su, v, self.rule)
    }
}

/// `v ↦ v - J(u) v`, the Jacobian of the fixed-point residual `ψ(u) = u - S(u)`.
pub struct FixedPointJacobian<S>(pub JacobianOperator<S>);

impl<S: Stepper> LinearOperator for FixedPointJacobian<S> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(v - self.0.apply(v)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::krylov::FnStepper;
    use nalgebra::DMatrix;

    #[test]
    fn exact_for_linear_maps() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, 0.5, 1.0, 0.3, 0.0, 0.2, 0.9]);
        let s = FnStepper::new(3, |u: &DVector<f64>| Ok(&a * u));
        let u = DVector::from_vec(vec![0.3, -0.1, 0.7]);
        let v = DVector::from_vec(vec![1.0, 2.0, -0.5]);
        let got = jvp(&s, &u, &v, EpsRule::default()).unwrap();
        let want = &a * &v;
        assert!((&got - &want).norm() <= 1e-7 * want.norm());
    }

    #[test]
    fn scales_with_direction_norm() {
        let s = FnStepper::new(2, |u: &DVector<f64>| Ok(u.map(|x| x.sin() + x * x)));
        let u = DVector::from_vec(vec![0.4, -0.2]);
        let v = DVector::from_vec(vec![0.3, 0.9]);
        let a = jvp(&s, &u, &v, EpsRule::default()).unwrap();
        let b = jvp(&s, &u, &(&v * 2.0), EpsRule::default()).unwrap();
        assert!((&b - &a * 2.0).norm() <= 1e-9 * b.norm());
    }

    #[test]
    fn rejects_zero_direction_and_propagates_nan() {
        let s = FnStepper::new(2, |u: &DVector<f64>| Ok(u.clone()));
        let u = DVector::zeros(2);
        assert!(jvp(&s, &u, &DVector::zeros(2), EpsRule::default()).is_err());
        let bad = FnStepper::new(2, |u: &DVector<f64>| Ok(u.map(|x| if x != 0.0 { f64::NAN } else { x })));
        assert!(matches!(jvp(&bad, &u, &DVector::from_element(2, 1.0), EpsRule::default()), Err(Error::NonFinite(_))));
    }
}
