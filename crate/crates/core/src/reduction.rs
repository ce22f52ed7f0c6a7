//! Reduced linear model around a fixed point: slow basis `V`, reduced dynamics
//! `F = Vᵀ J V`, actuator derivative `H` and reduced input map `D`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Grid};
use crate::io::{self, MatrixDoc};
use crate::krylov::dense::{eigenvalues, real_eigenbasis};
use crate::krylov::{arnoldi, ArnoldiResult, EpsRule, JacobianOperator, LinearOperator, Stepper};
use crate::plant::{ActuatorSet, FdPlant};

pub const REDUCED_SCHEMA_VERSION: u32 = 1;

/// Ritz pairs with a residual above this are reported as unreliable.
pub const RITZ_RESIDUAL_WARN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    /// The finite-difference reference plant.
    Fd,
    /// The learned timestepper with additive actuation `B z`.
    Surrogate,
}

impl PlantKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlantKind::Fd => "fd",
            PlantKind::Surrogate => "surrogate",
        }
    }
}

impl std::fmt::Display for PlantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PlantKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fd" => Ok(PlantKind::Fd),
            "surrogate" | "randonet" => Ok(PlantKind::Surrogate),
            other => Err(Error::invalid(format!("unknown plant kind '{other}' (expected fd or surrogate)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DMode {
    /// `D = (VᵀV)⁻¹ Vᵀ H`, matching `y = Vᵀ(u - u_ss)`.
    #[default]
    Consistent,
    /// The consistent `D` additionally left-multiplied by the real eigenbasis of `F`.
    PaperVf,
}

impl std::fmt::Display for DMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DMode::Consistent => "consistent",
            DMode::PaperVf => "paper_vf",
        })
    }
}

impl std::str::FromStr for DMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consistent" => Ok(DMode::Consistent),
            "paper_vf" => Ok(DMode::PaperVf),
            other => Err(Error::invalid(format!("unknown d mode '{other}' (expected consistent or paper_vf)"))),
        }
    }
}

/// Seeded Arnoldi start vector with zero end entries.
pub fn start_vector(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    if n > 2 {
        v[0] = 0.0;
        v[n - 1] = 0.0;
    }
    v
}

#[derive(Debug, Clone)]
pub struct SlowBasis {
    /// `n × m_slow` with orthonormal columns.
    pub v: DMatrix<f64>,
    /// Ritz values behind the columns, descending modulus.
    pub ritz_values: Vec<Complex64>,
    /// Largest Ritz residual among the retained pairs.
    pub max_ritz_residual: f64,
    /// The requested size was raised by one to keep a conjugate pair together.
    pub expanded: bool,
}

impl SlowBasis {
    pub fn m_slow(&self) -> usize {
        self.v.ncols()
    }
}

/// Slow basis from the `m_slow` leading Ritz pairs of an Arnoldi run.
pub fn slow_basis_from_arnoldi(ar: &ArnoldiResult, m_slow: usize) -> Result<SlowBasis> {
    if m_slow == 0 || m_slow > ar.steps {
        return Err(Error::invalid(format!("need 1 <= m_slow <= {} Ritz pairs, got {m_slow}", ar.steps)));
    }
    let mut take = m_slow;
    let mut expanded = false;
    if ar.ritz_values[take - 1].im > 0.0 {
        if take == ar.steps {
            return Err(Error::invalid("slow subspace cutoff splits a conjugate pair and no partner is available"));
        }
        log::warn!("m_slow = {m_slow} splits a conjugate Ritz pair; using {}", take + 1);
        take += 1;
        expanded = true;
    }
    let n = ar.q.nrows();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(take);
    let mut max_res: f64 = 0.0;
    let mut i = 0;
    while i < take {
        let mu = ar.ritz_values[i];
        let x = &ar.ritz_vectors[i];
        max_res = max_res.max(ar.ritz_residuals[i]);
        if mu.im == 0.0 {
            cols.push(x.map(|c| c.re));
            i += 1;
        } else {
            cols.push(x.map(|c| c.re));
            cols.push(x.map(|c| c.im));
            max_res = max_res.max(ar.ritz_residuals[i + 1]);
            i += 2;
        }
    }
    if max_res > RITZ_RESIDUAL_WARN {
        log::warn!("slow Ritz pairs have residual up to {max_res:e}; consider a larger Krylov dimension");
    }
    let raw = DMatrix::from_columns(&cols);
    let qr = raw.qr();
    let r = qr.r();
    let dmax = r.diagonal().amax();
    if r.diagonal().iter().any(|d| !(d.abs() > 1e-10 * dmax)) {
        return Err(Error::RankCollapse("slow Ritz vectors are linearly dependent".into()));
    }
    let mut v = qr.q();
    // Fix the sign of every column so the basis is reproducible.
    for mut col in v.column_iter_mut() {
        let idx = col.iamax();
        if col[idx] < 0.0 {
            col.neg_mut();
        }
    }
    debug_assert_eq!(v.nrows(), n);
    Ok(SlowBasis { v, ritz_values: ar.ritz_values[..take].to_vec(), max_ritz_residual: max_res, expanded })
}

/// Arnoldi with `m_k` steps on `op`, then [`slow_basis_from_arnoldi`].
pub fn slow_basis(op: &impl LinearOperator, m_slow: usize, m_k: usize, v0: &DVector<f64>) -> Result<(SlowBasis, ArnoldiResult)> {
    if m_slow > m_k {
        return Err(Error::invalid(format!("m_slow = {m_slow} exceeds the Krylov dimension {m_k}")));
    }
    let ar = arnoldi(op, v0, m_k)?;
    let basis = slow_basis_from_arnoldi(&ar, m_slow)?;
    Ok((basis, ar))
}

/// `F = Vᵀ J V`, one operator application per basis column.
pub fn reduced_f(op: &impl LinearOperator, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if v.nrows() != op.dim() {
        return Err(Error::DimensionMismatch { context: "slow basis rows", expected: op.dim(), found: v.nrows() });
    }
    let mut f = DMatrix::zeros(v.ncols(), v.ncols());
    for j in 0..v.ncols() {
        let jv = op.apply(&v.column(j).into_owned())?;
        f.set_column(j, &(v.transpose() * jv));
    }
    Ok(f)
}

/// One-sided differences of the controlled FD step in each actuator direction.
pub fn actuator_jacobian_fd(plant: &FdPlant, u_ss: &DVector<f64>, eps: f64) -> Result<DMatrix<f64>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("actuator perturbation must be positive and finite, got {eps:e}")));
    }
    let k = plant.actuators.k();
    let base = plant.step_raw(u_ss)?;
    let mut h = DMatrix::zeros(u_ss.len(), k);
    for i in 0..k {
        let mut z = DVector::zeros(k);
        z[i] = eps;
        let col = (plant.step_controlled_raw(u_ss, &z)? - &base) / eps;
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("actuator derivative column {i}")));
        }
        if col.amax() == 0.0 && plant.actuators.matrix().column(i).amax() > 0.0 {
            return Err(Error::invalid(format!("actuator perturbation {eps:e} is lost to rounding")));
        }
        h.set_column(i, &col);
    }
    Ok(h)
}

/// The surrogate applies `u ↦ S(u) + B z`, so its actuator derivative is `B`.
pub fn actuator_jacobian_surrogate(act: &ActuatorSet) -> DMatrix<f64> {
    act.matrix().clone()
}

/// `D` in the requested mode; returns the mode actually used.
pub fn reduced_d(v: &DMatrix<f64>, h: &DMatrix<f64>, f: &DMatrix<f64>, mode: DMode) -> Result<(DMatrix<f64>, DMode)> {
    if v.nrows() != h.nrows() {
        return Err(Error::DimensionMismatch { context: "H rows", expected: v.nrows(), found: h.nrows() });
    }
    if f.nrows() != v.ncols() || f.ncols() != v.ncols() {
        return Err(Error::DimensionMismatch { context: "F size", expected: v.ncols(), found: f.nrows() });
    }
    let gram = v.transpose() * v;
    let chol = gram.cholesky().ok_or(Error::Singular("slow basis Gram matrix"))?;
    let consistent = chol.solve(&(v.transpose() * h));
    match mode {
        DMode::Consistent => Ok((consistent, DMode::Consistent)),
        DMode::PaperVf => {
            let vf = real_eigenbasis(f, &eigenvalues(f))?;
            let sv = vf.singular_values();
            let cond = sv.max() / sv.min();
            if vf.ncols() != f.ncols() || !(cond < 1e12) {
                log::warn!("eigenbasis of F is singular (cond {cond:e}); falling back to the consistent D");
                return Ok((consistent, DMode::Consistent));
            }
            Ok((vf * consistent, DMode::PaperVf))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReductionOptions {
    pub m_slow: usize,
    /// Arnoldi steps.
    pub m_k: usize,
    pub d_mode: DMode,
    /// Seed of the Arnoldi start vector.
    pub start_seed: u64,
    /// Actuator perturbation for the FD `H`.
    pub h_eps: f64,
    pub eps: EpsRule,
}

impl Default for ReductionOptions {
    fn default() -> Self {
        ReductionOptions { m_slow: 5, m_k: 40, d_mode: DMode::Consistent, start_seed: 1, h_eps: 1e-4, eps: EpsRule::Scaled }
    }
}

/// Slow basis, `F`, and `D` at the fixed point `u_ss` of `stepper`, given its actuator derivative `h`.
pub fn build_reduced_model<S: Stepper>(
    stepper: S,
    plant: PlantKind,
    grid: Grid,
    u_ss: &DVector<f64>,
    h: DMatrix<f64>,
    h_eps: Option<f64>,
    opts: &ReductionOptions,
) -> Result<ReducedModel> {
    grid.check_len(u_ss.len(), "steady state")?;
    let fixed_point_residual = (u_ss - stepper.step(u_ss)?).norm();
    let jac = JacobianOperator::new(stepper, u_ss.clone(), opts.eps)?;
    let (basis, ar) = slow_basis(&jac, opts.m_slow, opts.m_k, &start_vector(grid.m, opts.start_seed))?;
    let f = reduced_f(&jac, &basis.v)?;
    let (d, d_mode) = reduced_d(&basis.v, &h, &f, opts.d_mode)?;
    let model = ReducedModel {
        grid,
        u_ss: u_ss.clone(),
        v: basis.v,
        f,
        h,
        d,
        d_mode,
        provenance: ReductionProvenance {
            plant,
            m_slow_requested: opts.m_slow,
            m_k: opts.m_k,
            start_seed: opts.start_seed,
            h_eps,
            fixed_point_residual,
            max_ritz_residual: basis.max_ritz_residual,
            ritz_values: ar.ritz_values,
        },
    };
    model.validate()?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionProvenance {
    pub plant: PlantKind,
    pub m_slow_requested: usize,
    pub m_k: usize,
    pub start_seed: u64,
    /// Actuator perturbation used for `H` (FD plant only).
    pub h_eps: Option<f64>,
    pub fixed_point_residual: f64,
    pub max_ritz_residual: f64,
    /// Leading Ritz values of the Arnoldi run (descending modulus).
    pub ritz_values: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedModel {
    pub grid: Grid,
    pub u_ss: DVector<f64>,
    pub v: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub d_mode: DMode,
    pub provenance: ReductionProvenance,
}

impl ReducedModel {
    pub fn m_slow(&self) -> usize {
        self.v.ncols()
    }

    pub fn k(&self) -> usize {
        self.h.ncols()
    }

    pub fn u_ss_field(&self) -> Result<Field> {
        Field::new(self.grid, self.u_ss.clone())
    }

    /// `y = Vᵀ(u - u_ss)` on raw nodal values.
    pub fn project_raw(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.grid.check_len(u.len(), "projected state")?;
        Ok(self.v.transpose() * (u - &self.u_ss))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.m;
        let ms = self.v.ncols();
        self.grid.check_len(self.u_ss.len(), "u_ss")?;
        if self.v.nrows() != n || self.f.shape() != (ms, ms) || self.h.nrows() != n || self.d.shape() != (ms, self.h.ncols()) {
            return Err(Error::invalid("reduced model shapes are inconsistent"));
        }
        for (name, m) in [("V", &self.v), ("F", &self.f), ("H", &self.h), ("D", &self.d)] {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("reduced model {name}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_json_string(&ReducedDoc::from(self))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        io::check_schema(text, REDUCED_SCHEMA_VERSION, "reduced model")?;
        let doc: ReducedDoc = io::from_json_str(text, "reduced model")?;
        let model = ReducedModel {
            grid: doc.grid,
            u_ss: DVector::from_vec(doc.u_ss),
            v: doc.v.to_matrix("V")?,
            f: doc.f.to_matrix("F")?,
            h: doc.h.to_matrix("H")?,
            d: doc.d.to_matrix("D")?,
            d_mode: doc.d_mode,
            provenance: doc.provenance,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&io::read_to_string(path)?)
    }
}

/// `y = Vᵀ(u - u_ss)`.
pub fn project(u: &Field, model: &ReducedModel) -> Result<DVector<f64>> {
    u.same_grid(&model.grid)?;
    model.project_raw(u.values())
}

#[derive(Serialize, Deserialize)]
struct ReducedDoc {
    schema_version: u32,
    grid: Grid,
    u_ss: Vec<f64>,
    v: MatrixDoc,
    f: MatrixDoc,
    h: MatrixDoc,
    d: MatrixDoc,
    d_mode: DMode,
    provenance: ReductionProvenance,
}

impl From<&ReducedModel> for ReducedDoc {
    fn from(m: &ReducedModel) -> Self {
        ReducedDoc {
            schema_version: REDUCED_SCHEMA_VERSION,
            grid: m.grid,
            u_ss: io::vec_to_doc(&m.u_ss),
            v: MatrixDoc::from(&m.v),
            f: MatrixDoc::from(&m.f),
            h: MatrixDoc::from(&m.h),
            d: MatrixDoc::from(&m.d),
            d_mode: m.d_mode,
            provenance: m.provenance.clone(),
        }
    }
}
