//! Discrete-time state feedback on a reduced model `y_{n+1} = F y_n + D z_n`:
//! LQR through the discrete algebraic Riccati equation, and pole placement.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, MatrixDoc};
use crate::krylov::dense::{eigenvalues, multiset_distance, spectral_radius};
use crate::reduction::PlantKind;

pub const GAIN_SCHEMA_VERSION: u32 = 1;

/// Riccati iterates beyond this norm count as divergence.
const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct LqrSpec {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LqrSpec {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let spec = LqrSpec { q, r };
        spec.validate()?;
        Ok(spec)
    }

    /// `Q = q I_m`, `R = r I_k`.
    pub fn scaled_identity(m: usize, k: usize, q: f64, r: f64) -> Result<Self> {
        Self::new(DMatrix::identity(m, m) * q, DMatrix::identity(k, k) * r)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("Q", &self.q), ("R", &self.r)] {
            if !m.is_square() {
                return Err(Error::invalid(format!("{name} must be square")));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("LQR weight {name}")));
            }
            let asym = (m - m.transpose()).amax();
            if asym > 1e-14 * m.amax().max(1.0) {
                return Err(Error::invalid(format!("{name} is not symmetric (max asymmetry {asym:e})")));
            }
        }
        let qmin = self.q.clone().symmetric_eigenvalues().min();
        if qmin < -1e-14 * self.q.amax().max(1.0) {
            return Err(Error::invalid(format!("Q must be positive semidefinite, smallest eigenvalue {qmin:e}")));
        }
        if self.r.nrows() == 0 || self.r.clone().cholesky().is_none() {
            return Err(Error::invalid("R must be positive definite"));
        }
        Ok(())
    }
}

/// PBH test: every eigenvalue of `F` with `|λ| >= 1` must be controllable.
pub fn check_stabilizable(f: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<()> {
    for lam in eigenvalues(f) {
        if lam.norm() >= 1.0 && !pbh_controllable(f, d, lam) {
            return Err(Error::NotStabilizable { eigenvalue: lam });
        }
    }
    Ok(())
}

/// Rank test on `[λI - F, D]`.
pub fn pbh_controllable(f: &DMatrix<f64>, d: &DMatrix<f64>, lam: Complex64) -> bool {
    let n = f.nrows();
    let k = d.ncols();
    let mut m = DMatrix::<Complex64>::zeros(n, n + k);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = Complex64::new(-f[(i, j)], 0.0);
        }
        m[(i, i)] += lam;
        for j in 0..k {
            m[(i, n + j)] = Complex64::new(d[(i, j)], 0.0);
        }
    }
    let sv = m.singular_values();
    let scale = f.amax().max(d.amax()).max(lam.norm()).max(1.0);
    sv.min() > 1e-10 * scale
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DareOptions {
    /// Stop when `||P_{j+1} - P_j||_max <= tol (1 + ||P_j||_max)`.
    pub tol: f64,
    /// Fixed-point iterations before switching to the doubling algorithm.
    pub maxiter: usize,
}

impl Default for DareOptions {
    fn default() -> Self {
        DareOptions { tol: 1e-13, maxiter: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DareMethod {
    FixedPoint,
    Doubling,
}

#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    pub iterations: usize,
    pub method: DareMethod,
    /// `||P - Ric(P)||_max / (1 + ||P||_max)`.
    pub residual: f64,
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let t = p.transpose();
    *p += t;
    *p *= 0.5;
}

fn riccati_map(f: &DMatrix<f64>, d: &DMatrix<f64>, spec: &LqrSpec, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ftp = f.transpose() * p;
    let s = &spec.r + d.transpose() * p * d;
    let chol = s.cholesky().ok_or(Error::Singular("R + DᵀPD"))?;
    let dtpf = d.transpose() * p * f;
    let mut next = &ftp * f - &ftp * d * chol.solve(&dtpf) + &spec.q;
    symmetrize(&mut next);
    Ok(next)
}

/// Relative DARE residual of a candidate `P`.
pub fn dare_residual(f: &DMatrix<f64>, d: &DMatrix<f64>, spec: &LqrSpec, p: &DMatrix<f64>) -> Result<f64> {
    let ric = riccati_map(f, d, spec, p)?;
    Ok((p - ric).amax() / (1.0 + p.amax()))
}

fn check_shapes(f: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<()> {
    if !f.is_square() {
        return Err(Error::invalid("F must be square"));
    }
    if d.nrows() != f.nrows() {
        return Err(Error::DimensionMismatch { context: "D rows", expected: f.nrows(), found: d.nrows() });
    }
    if f.iter().chain(d.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("F or D".into()));
    }
    Ok(())
}

/// Solves `P = FᵀPF - FᵀPD(R + DᵀPD)⁻¹DᵀPF + Q` by fixed-point iteration from
/// `P_0 = Q`, falling back to structure-preserving doubling after `opts.maxiter`.
pub fn solve_dare(f: &DMatrix<f64>, d: &DMatrix<f64>, spec: &LqrSpec, opts: &DareOptions) -> Result<DareSolution> {
    check_shapes(f, d)?;
    spec.validate()?;
    if spec.q.nrows() != f.nrows() || spec.r.nrows() != d.ncols() {
        return Err(Error::invalid("LQR weights do not match the sizes of F and D"));
    }
    check_stabilizable(f, d)?;

    let mut p = spec.q.clone();
    for it in 1..=opts.maxiter {
        let next = riccati_map(f, d, spec, &p)?;
        let norm = next.amax();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::RiccatiDiverged { norm, iterations: it });
        }
        let step = (&next - &p).amax();
        let converged = step <= opts.tol * (1.0 + p.amax());
        p = next;
        if converged {
            let residual = dare_residual(f, d, spec, &p)?;
            return Ok(DareSolution { p, iterations: it, method: DareMethod::FixedPoint, residual });
        }
    }
    log::info!("Riccati fixed point not converged after {} iterations; switching to doubling", opts.maxiter);
    let (p, iterations) = dare_doubling(f, d, spec, opts.tol)?;
    let residual = dare_residual(f, d, spec, &p)?;
    Ok(DareSolution { p, iterations, method: DareMethod::Doubling, residual })
}

/// Structure-preserving doubling: `A ← A W⁻¹ A`, `G ← G + A W⁻¹ G Aᵀ`,
/// `H ← H + Aᵀ H W⁻¹ A` with `W = I + G H`; `H` converges to `P`.
fn dare_doubling(f: &DMatrix<f64>, d: &DMatrix<f64>, spec: &LqrSpec, tol: f64) -> Result<(DMatrix<f64>, usize)> {
    let n = f.nrows();
    let r_chol = spec.r.clone().cholesky().ok_or(Error::Singular("R"))?;
    let mut a = f.clone();
    let mut g = d * r_chol.solve(&d.transpose());
    symmetrize(&mut g);
    let mut h = spec.q.clone();
    for it in 1..=100 {
        let w = DMatrix::identity(n, n) + &g * &h;
        let lu = w.lu();
        let w_inv_a = lu.solve(&a).ok_or(Error::Singular("doubling I + GH"))?;
        let w_inv_g = lu.solve(&g).ok_or(Error::Singular("doubling I + GH"))?;
        let a_next = &a * &w_inv_a;
        let mut g_next = &g + &a * w_inv_g * a.transpose();
        let mut h_next = &h + a.transpose() * &h * &w_inv_a;
        symmetrize(&mut g_next);
        symmetrize(&mut h_next);
        let norm = h_next.amax();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::RiccatiDiverged { norm, iterations: it });
        }
        let step = (&h_next - &h).amax();
        a = a_next;
        g = g_next;
        h = h_next;
        if step <= tol * (1.0 + h.amax()) {
            return Ok((h, it));
        }
    }
    Err(Error::RiccatiDiverged { norm: h.amax(), iterations: 100 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMethod {
    Dlqr,
    PolePlacement,
}

impl ControlMethod {
    pub fn short(&self) -> &'static str {
        match self {
            ControlMethod::Dlqr => "dlqr",
            ControlMethod::PolePlacement => "pp",
        }
    }
}

impl std::str::FromStr for ControlMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dlqr" | "lqr" => Ok(ControlMethod::Dlqr),
            "pp" | "pole_placement" | "place" => Ok(ControlMethod::PolePlacement),
            other => Err(Error::invalid(format!("unknown control method '{other}' (expected dlqr or pp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GainSpec {
    Lqr {
        q: MatrixDoc,
        r: MatrixDoc,
    },
    Poles {
        requested: Vec<Complex64>,
        /// Targets after collision perturbation.
        assigned: Vec<Complex64>,
        attempts: usize,
        cond_x: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerGain {
    /// `k × m_slow`; the control law is `z = -K y`.
    pub k: DMatrix<f64>,
    pub method: ControlMethod,
    pub spec: GainSpec,
    pub closed_loop_eigs: Vec<Complex64>,
    pub p: Option<DMatrix<f64>>,
    pub seed: Option<u64>,
    /// Plant whose reduced model the gain was designed on, when known.
    pub plant: Option<PlantKind>,
}

impl ControllerGain {
    pub fn spectral_radius(&self) -> f64 {
        self.closed_loop_eigs.first().map_or(0.0, |v| v.norm())
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_json_string(&GainDoc::from(self))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        io::check_schema(text, GAIN_SCHEMA_VERSION, "controller gain")?;
        let doc: GainDoc = io::from_json_str(text, "controller gain")?;
        let k = doc.k.to_matrix("K")?;
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stored gain".into()));
        }
        Ok(ControllerGain {
            k,
            method: doc.method,
            spec: doc.spec,
            closed_loop_eigs: doc.closed_loop_eigs,
            p: doc.p.map(|p| p.to_matrix("P")).transpose()?,
            seed: doc.seed,
            plant: doc.plant,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&io::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct GainDoc {
    schema_version: u32,
    k: MatrixDoc,
    method: ControlMethod,
    spec: GainSpec,
    closed_loop_eigs: Vec<Complex64>,
    p: Option<MatrixDoc>,
    seed: Option<u64>,
    plant: Option<PlantKind>,
}

impl From<&ControllerGain> for GainDoc {
    fn from(g: &ControllerGain) -> Self {
        GainDoc {
            schema_version: GAIN_SCHEMA_VERSION,
            k: MatrixDoc::from(&g.k),
            method: g.method,
            spec: g.spec.clone(),
            closed_loop_eigs: g.closed_loop_eigs.clone(),
            p: g.p.as_ref().map(MatrixDoc::from),
            seed: g.seed,
            plant: g.plant,
        }
    }
}

/// Eigenvalues of `F - D K`, descending modulus.
pub fn closed_loop_eigs(f: &DMatrix<f64>, d: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    check_shapes(f, d)?;
    if k.shape() != (d.ncols(), f.ncols()) {
        return Err(Error::invalid(format!("gain is {}x{}, expected {}x{}", k.nrows(), k.ncols(), d.ncols(), f.ncols())));
    }
    Ok(eigenvalues(&(f - d * k)))
}

/// `K = (R + DᵀPD)⁻¹ DᵀPF` from the stabilizing DARE solution.
pub fn dlqr_gain(f: &DMatrix<f64>, d: &DMatrix<f64>, spec: &LqrSpec, opts: &DareOptions) -> Result<ControllerGain> {
    let sol = solve_dare(f, d, spec, opts)?;
    let p = sol.p;
    let s = &spec.r + d.transpose() * &p * d;
    let chol = s.cholesky().ok_or(Error::Singular("R + DᵀPD"))?;
    let k = chol.solve(&(d.transpose() * &p * f));
    let eigs = closed_loop_eigs(f, d, &k)?;
    let radius = eigs.first().map_or(0.0, |v| v.norm());
    if !(radius < 1.0) {
        return Err(Error::UnstableClosedLoop { radius });
    }
    log::debug!("dlqr: {} Riccati iterations ({:?}), residual {:e}", sol.iterations, sol.method, sol.residual);
    Ok(ControllerGain {
        k,
        method: ControlMethod::Dlqr,
        spec: GainSpec::Lqr { q: MatrixDoc::from(&spec.q), r: MatrixDoc::from(&spec.r) },
        closed_loop_eigs: eigs,
        p: Some(p),
        seed: None,
        plant: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaceOptions {
    pub max_attempts: usize,
    /// Largest acceptable condition number of the Sylvester solution `X`.
    pub max_cond: f64,
    /// Shift applied to targets that collide with each other or with eig(F).
    pub collision_shift: f64,
}

impl Default for PlaceOptions {
    fn default() -> Self {
        PlaceOptions { max_attempts: 10, max_cond: 1e8, collision_shift: 1e-8 }
    }
}

fn check_conjugate_closed(poles: &[Complex64]) -> Result<()> {
    for p in poles {
        if p.im != 0.0 {
            let partners = poles.iter().filter(|q| (**q - p.conj()).norm() <= 1e-12 * (1.0 + p.norm())).count();
            let selves = poles.iter().filter(|q| (**q - p).norm() <= 1e-12 * (1.0 + p.norm())).count();
            if partners != selves {
                return Err(Error::invalid(format!("target poles are not closed under conjugation ({p})")));
            }
        }
    }
    Ok(())
}

/// Moves targets that coincide with each other or with eig(F) by `shift`.
fn separate_targets(poles: &[Complex64], open: &[Complex64], shift: f64) -> Vec<Complex64> {
    let mut out: Vec<Complex64> = Vec::with_capacity(poles.len());
    let close = |a: Complex64, b: Complex64| (a - b).norm() <= shift;
    for &p in poles {
        let mut q = p;
        let mut bumps = 0;
        while out.iter().any(|&o| close(o, q) && !(q.im != 0.0 && (o - q.conj()).norm() == 0.0)) || open.iter().any(|&e| close(e, q)) {
            bumps += 1;
            q = Complex64::new(p.re + shift * 2.0 * bumps as f64, p.im);
        }
        if q != p {
            log::warn!("target pole {p} collides; shifted to {q}");
        }
        out.push(q);
    }
    // Keep conjugate partners consistent after shifting.
    for i in 0..out.len() {
        if poles[i].im < 0.0 {
            if let Some(j) = (0..poles.len()).find(|&j| poles[j] == poles[i].conj()) {
                out[i] = out[j].conj();
            }
        }
    }
    out
}

/// Real block diagonal with the targets on it: `[a b; -b a]` for each pair `a ± ib`.
fn real_block_diagonal(poles: &[Complex64]) -> DMatrix<f64> {
    let n = poles.len();
    let mut lam = DMatrix::zeros(n, n);
    let mut used = vec![false; n];
    let mut i = 0;
    for (idx, &p) in poles.iter().enumerate() {
        if used[idx] {
            continue;
        }
        used[idx] = true;
        if p.im == 0.0 {
            lam[(i, i)] = p.re;
            i += 1;
        } else {
            if let Some(j) = (0..n).find(|&j| !used[j] && poles[j] == p.conj()) {
                used[j] = true;
            }
            let (a, b) = (p.re, p.im.abs());
            lam[(i, i)] = a;
            lam[(i, i + 1)] = b;
            lam[(i + 1, i)] = -b;
            lam[(i + 1, i + 1)] = a;
            i += 2;
        }
    }
    lam
}

/// Solves `F X - X Λ = C` through the Kronecker form `(I ⊗ F - Λᵀ ⊗ I) vec X = vec C`.
fn sylvester(f: &DMatrix<f64>, lam: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    let m = lam.nrows();
    let mut big = DMatrix::zeros(n * m, n * m);
    for j in 0..m {
        for i in 0..n {
            for l in 0..n {
                big[(j * n + i, j * n + l)] += f[(i, l)];
            }
        }
        for l in 0..m {
            let coeff = lam[(l, j)];
            if coeff != 0.0 {
                for i in 0..n {
                    big[(j * n + i, l * n + i)] -= coeff;
                }
            }
        }
    }
    let rhs = DVector::from_column_slice(c.as_slice());
    let x = big.lu().solve(&rhs).ok_or(Error::Singular("Sylvester operator"))?;
    Ok(DMatrix::from_column_slice(n, m, x.as_slice()))
}

/// Sylvester-based assignment: random `G`, solve `F X - X Λ = D G`, then `K = G X⁻¹`
/// gives `F - D K = X Λ X⁻¹`.
pub fn pole_place(f: &DMatrix<f64>, d: &DMatrix<f64>, poles: &[Complex64], seed: u64, opts: &PlaceOptions) -> Result<ControllerGain> {
    check_shapes(f, d)?;
    let n = f.nrows();
    if poles.len() != n {
        return Err(Error::invalid(format!("need {n} target poles, got {}", poles.len())));
    }
    if poles.iter().any(|p| !(p.re.is_finite() && p.im.is_finite())) {
        return Err(Error::NonFinite("target poles".into()));
    }
    check_conjugate_closed(poles)?;
    let open = eigenvalues(f);
    for &lam in &open {
        if !pbh_controllable(f, d, lam) {
            let pole = poles.iter().copied().find(|p| (*p - lam).norm() > 1e-12).unwrap_or(lam);
            return Err(Error::Uncontrollable { pole, eigenvalue: lam });
        }
    }
    let targets = separate_targets(poles, &open, opts.collision_shift);
    let lam = real_block_diagonal(&targets);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for attempt in 1..=opts.max_attempts {
        let g = DMatrix::from_fn(d.ncols(), n, |_, _| rng.random_range(-1.0..1.0));
        let x = match sylvester(f, &lam, &(d * &g)) {
            Ok(x) => x,
            Err(_) => continue,
        };
        let sv = x.singular_values();
        let cond = sv.max() / sv.min();
        if !(cond <= opts.max_cond) {
            worst = worst.max(if cond.is_finite() { cond } else { f64::MAX });
            log::debug!("pole placement attempt {attempt}: cond(X) = {cond:e}, retrying");
            continue;
        }
        let x_inv = x.clone().try_inverse().ok_or(Error::Singular("Sylvester solution X"))?;
        let k = &g * x_inv;
        let eigs = closed_loop_eigs(f, d, &k)?;
        let err = multiset_distance(&eigs, &targets);
        log::debug!("pole placement attempt {attempt}: cond(X) = {cond:e}, assignment error {err:e}");
        return Ok(ControllerGain {
            k,
            method: ControlMethod::PolePlacement,
            spec: GainSpec::Poles { requested: poles.to_vec(), assigned: targets, attempts: attempt, cond_x: cond },
            closed_loop_eigs: eigs,
            p: None,
            seed: Some(seed),
            plant: None,
        });
    }
    Err(Error::IllConditioned { what: "Sylvester solution X in every pole-placement attempt", cond: worst })
}

/// Spectral radius of `F - D K`.
pub fn closed_loop_radius(f: &DMatrix<f64>, d: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<f64> {
    check_shapes(f, d)?;
    Ok(spectral_radius(&(f - d * k)))
}
