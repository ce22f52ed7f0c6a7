//! Random-embedding branch/trunk operator network (RandONet).
//!
//! The trunk is a layer of logistic sigmoids with frozen random slopes and
//! centers, evaluated at the output nodes. The branch is a random Fourier
//! feature map of the sampled input function. Only the output weights `W` are
//! fitted, by two decoupled least-squares solves:
//!
//! ```text
//! min_W || T W B - Y ||_F        W = T⁺ Y B⁺
//! ```
//!
//! `T⁺` comes from an SVD of the small `m × N` trunk matrix. `Y B⁺` is a
//! Tikhonov-regularized solve on the `M_br × M_br` Gram matrix, accumulated
//! over sample chunks so the `M_br × s` branch matrix never exists in full.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::SnapshotDataset;
use crate::error::{Error, Result};
use crate::field::{Field, Grid};
use crate::io::{self, MatrixDoc};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct TrunkParams {
    pub a_u: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub centers: Vec<f64>,
}

impl TrunkParams {
    pub fn n(&self) -> usize {
        self.alpha.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub eps_rff: f64,
    /// `M_br × m` Gaussian weights.
    pub alpha: DMatrix<f64>,
    /// Phases in `[0, 2π)`.
    pub beta: DVector<f64>,
}

impl BranchParams {
    pub fn m_br(&self) -> usize {
        self.alpha.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSpec {
    pub n_trunk: usize,
    pub m_branch: usize,
    pub a_u: f64,
    pub eps_rff: f64,
    pub seed: u64,
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        EmbeddingSpec { n_trunk: 200, m_branch: 2000, a_u: 25.0, eps_rff: 0.2, seed: 2024 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegularizationSpec {
    /// Tikhonov weight relative to the mean diagonal of the branch Gram matrix.
    pub ridge: f64,
    /// Singular values of the trunk matrix below `trunk_rcond · σ_max` are dropped.
    pub trunk_rcond: f64,
    /// Pairs whose input or target leaves `|u| <= bound` are left out of the fit.
    /// Trajectories heading for blow-up otherwise dominate the least-squares residual.
    pub domain_bound: Option<f64>,
}

impl Default for RegularizationSpec {
    fn default() -> Self {
        RegularizationSpec { ridge: 1e-10, trunk_rcond: 1e-12, domain_bound: Some(6.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub regularization: RegularizationSpec,
    /// Absolute Tikhonov weight actually used.
    pub ridge_abs: f64,
    pub trunk_rank: usize,
    /// Pairs used in the fit, and pairs left out by the domain bound.
    pub samples: usize,
    pub excluded: usize,
    pub dataset_seed: u64,
    /// `||T W B - Y||_F / ||Y||_F` over the pairs used.
    pub fit_residual: f64,
    pub input_normalization: String,
}

#[derive(Debug, Clone)]
pub struct RandONetModel {
    pub grid: Grid,
    pub dt_report: f64,
    pub trunk: TrunkParams,
    pub branch: BranchParams,
    /// `N × M_br` output weights.
    pub w: DMatrix<f64>,
    pub meta: TrainingMeta,
    /// `T(nodes) · W`, cached for prediction.
    tw: DMatrix<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Draws trunk and branch parameters from one seeded stream.
pub fn init_embeddings(m: usize, spec: &EmbeddingSpec, domain: (f64, f64)) -> Result<(TrunkParams, BranchParams)> {
    if m == 0 || spec.n_trunk == 0 || spec.m_branch == 0 {
        return Err(Error::invalid("embedding sizes must be positive"));
    }
    if !(spec.a_u >= 0.0 && spec.a_u.is_finite()) || !(spec.eps_rff > 0.0 && spec.eps_rff.is_finite()) {
        return Err(Error::invalid(format!("need a_U >= 0 and eps_rff > 0, got {} and {}", spec.a_u, spec.eps_rff)));
    }
    if !(domain.1 > domain.0) {
        return Err(Error::invalid("empty trunk domain"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut alpha = Vec::with_capacity(spec.n_trunk);
    let mut centers = Vec::with_capacity(spec.n_trunk);
    for _ in 0..spec.n_trunk {
        let a = if spec.a_u > 0.0 { rng.random_range(-spec.a_u..=spec.a_u) } else { 0.0 };
        alpha.push(a);
        centers.push(rng.random_range(domain.0..=domain.1));
    }
    let beta = alpha.iter().zip(&centers).map(|(a, c)| -(a * c)).collect();
    let trunk = TrunkParams { a_u: spec.a_u, alpha, beta, centers };

    let normal = Normal::new(0.0, spec.eps_rff).expect("positive standard deviation");
    let branch_alpha = DMatrix::from_fn(spec.m_branch, m, |_, _| normal.sample(&mut rng));
    let two_pi = 2.0 * std::f64::consts::PI;
    let branch_beta = DVector::from_fn(spec.m_branch, |_, _| rng.random_range(0.0..two_pi));
    let branch = BranchParams { eps_rff: spec.eps_rff, alpha: branch_alpha, beta: branch_beta };
    Ok((trunk, branch))
}

/// `|xs| × N` matrix of `σ(x_j α_k + β_k)`.
pub fn featurize_trunk(trunk: &TrunkParams, xs: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(xs.len(), trunk.n(), |j, k| sigmoid(xs[j] * trunk.alpha[k] + trunk.beta[k]))
}

/// `M_br × s` random Fourier features of the rows of `u` (`s × m`).
pub fn featurize_branch(branch: &BranchParams, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if u.ncols() != branch.alpha.ncols() {
        return Err(Error::DimensionMismatch { context: "branch input width", expected: branch.alpha.ncols(), found: u.ncols() });
    }
    Ok(branch_features_cols(branch, &u.transpose()))
}

/// Same as [`featurize_branch`] but with samples already stored column-wise (`m × s`).
fn branch_features_cols(branch: &BranchParams, cols: &DMatrix<f64>) -> DMatrix<f64> {
    let scale = (2.0 / branch.m_br() as f64).sqrt();
    let mut z = &branch.alpha * cols;
    for mut col in z.column_iter_mut() {
        for (i, v) in col.iter_mut().enumerate() {
            *v = scale * (*v + branch.beta[i]).cos();
        }
    }
    z
}

fn branch_features_vec(branch: &BranchParams, u: &DVector<f64>) -> DVector<f64> {
    let scale = (2.0 / branch.m_br() as f64).sqrt();
    let mut z = &branch.alpha * u;
    for (i, v) in z.iter_mut().enumerate() {
        *v = scale * (*v + branch.beta[i]).cos();
    }
    z
}

fn gather(vs: &[DVector<f64>], idx: &[usize], m: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m, idx.len());
    for (c, &i) in idx.iter().enumerate() {
        out.set_column(c, &vs[i]);
    }
    out
}

/// `T⁺ X` applied factor by factor. Forming `T⁺` explicitly would cost
/// `eps · cond(T)` accuracy in `T T⁺ X`, and the trunk matrix is routinely
/// conditioned around 1e10.
fn apply_trunk_pinv(svd: &nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>, cutoff: f64, x: &DMatrix<f64>) -> DMatrix<f64> {
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut coeffs = u.transpose() * x;
    for (k, mut row) in coeffs.row_iter_mut().enumerate() {
        let sigma = svd.singular_values[k];
        if sigma > cutoff {
            row /= sigma;
        } else {
            row.fill(0.0);
        }
    }
    v_t.transpose() * coeffs
}

/// Fits the output weights by decoupled pseudo-inverses.
pub fn train_bilinear_lsq(
    dataset: &SnapshotDataset,
    trunk: TrunkParams,
    branch: BranchParams,
    reg: &RegularizationSpec,
) -> Result<RandONetModel> {
    dataset.validate()?;
    let grid = dataset.grid;
    let m = grid.m;
    if branch.alpha.ncols() != m {
        return Err(Error::DimensionMismatch { context: "branch sensors", expected: m, found: branch.alpha.ncols() });
    }
    let bound = reg.domain_bound.unwrap_or(f64::INFINITY);
    let used: Vec<usize> =
        (0..dataset.len()).filter(|&i| dataset.inputs[i].amax() <= bound && dataset.targets[i].amax() <= bound).collect();
    if used.is_empty() {
        return Err(Error::invalid(format!("no training pair lies within the domain bound {bound}")));
    }
    let excluded = dataset.len() - used.len();
    if excluded > 0 {
        log::info!("{excluded} pairs outside |u| <= {bound} left out of the fit");
    }
    let mb = branch.m_br();

    let t = featurize_trunk(&trunk, &grid.nodes());
    if t.amax() == 0.0 {
        return Err(Error::RankCollapse("trunk features are identically zero".into()));
    }
    let svd = t.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = reg.trunk_rcond * smax;
    let trunk_rank = svd.singular_values.iter().filter(|&&v| v > cutoff).count();

    // Ridge-augmented least squares  [Bᵀ; √μ I] Xᵀ ≈ [Yᵀ; 0], solved by thin QR.
    let s_used = used.len();
    let mut a_mat = DMatrix::<f64>::zeros(s_used + mb, mb);
    let mut rhs = DMatrix::<f64>::zeros(s_used + mb, m);
    for (c, idx) in used.chunks(CHUNK).enumerate() {
        let rows = branch_features_cols(&branch, &gather(&dataset.inputs, idx, m)).transpose();
        a_mat.view_mut((c * CHUNK, 0), (idx.len(), mb)).copy_from(&rows);
        rhs.view_mut((c * CHUNK, 0), (idx.len(), m)).copy_from(&gather(&dataset.targets, idx, m).transpose());
    }
    let y_norm2 = rhs.norm_squared();
    let mean_sq = a_mat.norm_squared() / mb as f64;
    if !(mean_sq > 0.0) || !mean_sq.is_finite() {
        return Err(Error::RankCollapse(format!("branch features have mean squared column norm {mean_sq:e}")));
    }
    let ridge_abs = reg.ridge * mean_sq;
    let sqrt_ridge = ridge_abs.sqrt();
    for i in 0..mb {
        a_mat[(s_used + i, i)] = sqrt_ridge;
    }
    let qr = a_mat.qr();
    qr.q_tr_mul(&mut rhs);
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    let diag_min = r.diagonal().iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    if !(diag_min > 1e-14 * diag_max) {
        return Err(Error::RankCollapse(format!(
            "branch least squares is rank deficient (|R| diagonal range {diag_min:e} .. {diag_max:e}); increase the ridge"
        )));
    }
    let top = rhs.rows(0, mb).into_owned();
    let xt = r.solve_upper_triangular(&top).ok_or(Error::Singular("branch triangular factor"))?;
    let x = xt.transpose();
    let w = apply_trunk_pinv(&svd, cutoff, &x);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("output weights".into()));
    }
    let tw = &t * &w;

    let mut model = RandONetModel {
        grid,
        dt_report: dataset.dt_report,
        trunk,
        branch,
        w,
        meta: TrainingMeta {
            regularization: *reg,
            ridge_abs,
            trunk_rank,
            samples: used.len(),
            excluded,
            dataset_seed: dataset.provenance.seed,
            fit_residual: f64::NAN,
            input_normalization: "none".into(),
        },
        tw,
    };
    let err2 = model.residual_sq(&model.tw, dataset, &used);
    model.meta.fit_residual = (err2 / y_norm2.max(f64::MIN_POSITIVE)).sqrt();
    Ok(model)
}

impl RandONetModel {
    pub fn n_trunk(&self) -> usize {
        self.trunk.n()
    }

    pub fn m_branch(&self) -> usize {
        self.branch.m_br()
    }

    /// One surrogate step on raw nodal values.
    pub fn predict_raw(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.grid.check_len(u.len(), "surrogate input")?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("surrogate input".into()));
        }
        let b = branch_features_vec(&self.branch, u);
        let mut out = &self.tw * b;
        let last = out.len() - 1;
        out[0] = 0.0;
        out[last] = 0.0;
        Ok(out)
    }

    /// `T(nodes) W B(u)` with the Dirichlet boundary clamped: the learned `S_Δt`.
    pub fn predict(&self, u: &Field) -> Result<Field> {
        u.same_grid(&self.grid)?;
        Field::new(self.grid, self.predict_raw(u.values())?)
    }

    /// Indices of `dataset` that fall inside the model's training domain.
    pub fn in_domain(&self, dataset: &SnapshotDataset) -> Vec<usize> {
        let bound = self.meta.regularization.domain_bound.unwrap_or(f64::INFINITY);
        (0..dataset.len()).filter(|&i| dataset.inputs[i].amax() <= bound && dataset.targets[i].amax() <= bound).collect()
    }

    fn residual_sq(&self, tw: &DMatrix<f64>, dataset: &SnapshotDataset, idx: &[usize]) -> f64 {
        let m = self.grid.m;
        idx.chunks(CHUNK)
            .map(|c| {
                let bc = branch_features_cols(&self.branch, &gather(&dataset.inputs, c, m));
                (tw * bc - gather(&dataset.targets, c, m)).norm_squared()
            })
            .sum()
    }

    /// Regularized training objective `||T W B - Y||_F^2 + ridge ||T W||_F^2` for a
    /// candidate weight matrix over the in-domain pairs of `dataset`.
    pub fn objective(&self, w: &DMatrix<f64>, dataset: &SnapshotDataset) -> f64 {
        let t = featurize_trunk(&self.trunk, &self.grid.nodes());
        let tw = &t * w;
        self.residual_sq(&tw, dataset, &self.in_domain(dataset)) + self.meta.ridge_abs * tw.norm_squared()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &ModelDoc::from(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_json_string(&ModelDoc::from(self))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        io::check_schema(text, MODEL_SCHEMA_VERSION, "model")?;
        let doc: ModelDoc = io::from_json_str(text, "model")?;
        doc.into_model()
    }
}

impl crate::krylov::Stepper for RandONetModel {
    fn dim(&self) -> usize {
        self.grid.m
    }
    fn step(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.predict_raw(u)
    }
}

#[derive(Serialize, Deserialize)]
struct TrunkDoc {
    n: usize,
    a_u: f64,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    centers: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BranchDoc {
    m_br: usize,
    eps_rff: f64,
    alpha: MatrixDoc,
    beta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    schema_version: u32,
    grid: Grid,
    dt_report: f64,
    trunk: TrunkDoc,
    branch: BranchDoc,
    w: MatrixDoc,
    training_meta: TrainingMeta,
}

impl From<&RandONetModel> for ModelDoc {
    fn from(m: &RandONetModel) -> Self {
        ModelDoc {
            schema_version: MODEL_SCHEMA_VERSION,
            grid: m.grid,
            dt_report: m.dt_report,
            trunk: TrunkDoc {
                n: m.trunk.n(),
                a_u: m.trunk.a_u,
                alpha: m.trunk.alpha.clone(),
                beta: m.trunk.beta.clone(),
                centers: m.trunk.centers.clone(),
            },
            branch: BranchDoc {
                m_br: m.branch.m_br(),
                eps_rff: m.branch.eps_rff,
                alpha: MatrixDoc::from(&m.branch.alpha),
                beta: io::vec_to_doc(&m.branch.beta),
            },
            w: MatrixDoc::from(&m.w),
            training_meta: m.meta.clone(),
        }
    }
}

impl ModelDoc {
    fn into_model(self) -> Result<RandONetModel> {
        let bad = |message: String| Error::Format { what: "model".into(), message };
        self.grid.validate()?;
        let n = self.trunk.n;
        if self.trunk.alpha.len() != n || self.trunk.beta.len() != n || self.trunk.centers.len() != n {
            return Err(bad(format!("trunk arrays do not have length {n}")));
        }
        let alpha = self.branch.alpha.to_matrix("branch alpha")?;
        if alpha.nrows() != self.branch.m_br || alpha.ncols() != self.grid.m || self.branch.beta.len() != self.branch.m_br {
            return Err(bad("branch shapes do not match m_br and the grid".into()));
        }
        let w = self.w.to_matrix("W")?;
        if w.nrows() != n || w.ncols() != self.branch.m_br {
            return Err(bad(format!("W is {}x{}, expected {}x{}", w.nrows(), w.ncols(), n, self.branch.m_br)));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stored output weights".into()));
        }
        let trunk = TrunkParams { a_u: self.trunk.a_u, alpha: self.trunk.alpha, beta: self.trunk.beta, centers: self.trunk.centers };
        let t = featurize_trunk(&trunk, &self.grid.nodes());
        let tw = &t * &w;
        Ok(RandONetModel {
            grid: self.grid,
            dt_report: self.dt_report,
            trunk,
            branch: BranchParams { eps_rff: self.branch.eps_rff, alpha, beta: DVector::from_vec(self.branch.beta) },
            w,
            meta: self.training_meta,
            tw,
        })
    }
}
