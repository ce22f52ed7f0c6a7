//! Stage orchestration: configuration, artifact layout, and the summary report.
//!
//! Every stage reads the artifacts of earlier stages from the output directory
//! and writes its own, so each one can be rerun in isolation.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{dlqr_gain, pole_place, ControlMethod, ControllerGain, DareOptions, LqrSpec, PlaceOptions};
use crate::datagen::{generate_training_pairs, DataGenSpec, SnapshotDataset};
use crate::error::{Error, Result};
use crate::field::Grid;
use crate::io::{self, fmt_f64};
use crate::krylov::{arnoldi, newton_krylov_fixed_point, JacobianOperator, NewtonOptions, Stepper};
use crate::plant::{analytic_steady_state, initial_perturbation, ActuatorSet, Branch, FdPlant, PlantConfig};
use crate::randonet::{init_embeddings, train_bilinear_lsq, EmbeddingSpec, RandONetModel, RegularizationSpec};
use crate::reduction::{
    actuator_jacobian_fd, actuator_jacobian_surrogate, build_reduced_model, start_vector, PlantKind, ReducedModel, ReductionOptions,
};
use crate::simulate::{run_closed_loop, run_open_loop, ClosedLoopTrace, ControlledPlant, SimOptions};

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

/// Error level the FD closed loop is expected to reach.
pub const CONVERGED_LEVEL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Train,
    SteadyState,
    Spectrum,
    Reduce,
    Design,
    Simulate,
    Report,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::SteadyState => "steady-state",
            Stage::Spectrum => "spectrum",
            Stage::Reduce => "reduce",
            Stage::Design => "design",
            Stage::Simulate => "simulate",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {error}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub error: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

/// One-line `key=value` record of what a stage did.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub stage: Stage,
    pub fields: Vec<(String, String)>,
}

impl Summary {
    fn new(stage: Stage) -> Self {
        Summary { stage, fields: Vec::new() }
    }

    fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage={}", self.stage)?;
        for (k, v) in &self.fields {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    pub lambda: f64,
    pub nodes: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    pub dt_report: f64,
    pub dt_inner: f64,
}

impl Default for PlantSection {
    fn default() -> Self {
        let p = PlantConfig::bratu_default();
        PlantSection {
            lambda: p.lambda,
            nodes: p.grid.m,
            x_lo: p.grid.x_lo,
            x_hi: p.grid.x_hi,
            dt_report: p.dt_report,
            dt_inner: p.dt_inner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActuatorSection {
    pub centers: Vec<f64>,
    pub sigma: f64,
}

impl Default for ActuatorSection {
    fn default() -> Self {
        ActuatorSection { centers: vec![0.25, 0.5, 0.75], sigma: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataGenSection {
    pub seed: u64,
    pub spec: DataGenSpec,
}

impl Default for DataGenSection {
    fn default() -> Self {
        DataGenSection { seed: 7, spec: DataGenSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embedding: EmbeddingSpec,
    pub ridge: f64,
    pub trunk_rcond: f64,
    /// Pairs leaving `|u| <= domain_bound` are not fitted; `inf` keeps all.
    pub domain_bound: f64,
    /// Fraction of whole trajectories held out for validation.
    pub holdout_fraction: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let reg = RegularizationSpec::default();
        ModelSection {
            embedding: EmbeddingSpec::default(),
            ridge: reg.ridge,
            trunk_rcond: reg.trunk_rcond,
            domain_bound: reg.domain_bound.unwrap_or(f64::INFINITY),
            holdout_fraction: 0.1,
        }
    }
}

impl ModelSection {
    pub fn regularization(&self) -> RegularizationSpec {
        RegularizationSpec {
            ridge: self.ridge,
            trunk_rcond: self.trunk_rcond,
            domain_bound: self.domain_bound.is_finite().then_some(self.domain_bound),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonSection {
    pub fd: NewtonOptions,
    pub surrogate: NewtonOptions,
}

impl Default for NewtonSection {
    fn default() -> Self {
        NewtonSection { fd: NewtonOptions::default(), surrogate: NewtonOptions { tol_res: 1e-9, ..Default::default() } }
    }
}

/// A target pole: a real number or a `[re, im]` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PoleDoc {
    Real(f64),
    Complex([f64; 2]),
}

impl From<PoleDoc> for Complex64 {
    fn from(p: PoleDoc) -> Self {
        match p {
            PoleDoc::Real(re) => Complex64::new(re, 0.0),
            PoleDoc::Complex([re, im]) => Complex64::new(re, im),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    /// `Q = q_scale · I`.
    pub q_scale: f64,
    /// `R = r_scale · I`; the default is `10 Δt²`.
    pub r_scale: f64,
    pub dare: DareOptions,
    pub poles: Vec<PoleDoc>,
    pub pole_seed: u64,
    pub place: PlaceOptions,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let dt = PlantConfig::bratu_default().dt_report;
        ControllerSection {
            q_scale: 0.5,
            r_scale: 10.0 * dt * dt,
            dare: DareOptions::default(),
            poles: [0.30, 0.425, 0.55, 0.675, 0.80].into_iter().map(PoleDoc::Real).collect(),
            pole_seed: 0,
            place: PlaceOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// `u_ss · (1.2 + 0.4 sin(10πx) + 0.4 eˣ)`.
    Perturbation,
    SteadyState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub steps: usize,
    pub snapshot_every: usize,
    pub initial: InitialState,
    pub allow_mismatch: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        let d = SimOptions::default();
        SimSection { steps: d.steps, snapshot_every: d.snapshot_every, initial: InitialState::Perturbation, allow_mismatch: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub plant: PlantSection,
    pub actuators: ActuatorSection,
    pub datagen: DataGenSection,
    pub model: ModelSection,
    pub newton: NewtonSection,
    pub reduction: ReductionOptions,
    pub controllers: ControllerSection,
    pub sim: SimSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            output_dir: PathBuf::from("out"),
            plant: PlantSection::default(),
            actuators: ActuatorSection::default(),
            datagen: DataGenSection::default(),
            model: ModelSection::default(),
            newton: NewtonSection::default(),
            reduction: ReductionOptions::default(),
            controllers: ControllerSection::default(),
            sim: SimSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&io::read_to_string(path)?)
    }

    /// Every field written out, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        let plant = self.plant_config().map_err(cfg_err)?;
        self.actuator_set(&plant.grid).map_err(cfg_err)?;
        let m = &self.model;
        if !(m.holdout_fraction >= 0.0 && m.holdout_fraction < 1.0) {
            return Err(Error::Config(format!("holdout_fraction must lie in [0, 1), got {}", m.holdout_fraction)));
        }
        if !(m.ridge >= 0.0) || !(m.domain_bound > 0.0) {
            return Err(Error::Config("ridge must be >= 0 and domain_bound > 0".into()));
        }
        let r = &self.reduction;
        if r.m_slow == 0 || r.m_slow > r.m_k || r.m_k > plant.grid.m {
            return Err(Error::Config(format!("need 1 <= m_slow <= m_k <= nodes, got {} / {} / {}", r.m_slow, r.m_k, plant.grid.m)));
        }
        let c = &self.controllers;
        if !(c.q_scale >= 0.0 && c.r_scale > 0.0) {
            return Err(Error::Config("q_scale must be >= 0 and r_scale > 0".into()));
        }
        if self.sim.steps == 0 {
            return Err(Error::Config("sim.steps must be positive".into()));
        }
        Ok(())
    }

    pub fn plant_config(&self) -> Result<PlantConfig> {
        let p = &self.plant;
        PlantConfig::new(p.lambda, p.dt_report, p.dt_inner, Grid::new(p.nodes, p.x_lo, p.x_hi)?)
    }

    pub fn actuator_set(&self, grid: &Grid) -> Result<ActuatorSet> {
        ActuatorSet::gaussian(grid, &self.actuators.centers, self.actuators.sigma)
    }

    pub fn fd_plant(&self) -> Result<FdPlant> {
        let cfg = self.plant_config()?;
        let act = self.actuator_set(&cfg.grid)?;
        FdPlant::new(cfg, act)
    }

    pub fn target_poles(&self) -> Vec<Complex64> {
        self.controllers.poles.iter().map(|&p| p.into()).collect()
    }

    pub fn artifacts(&self) -> Artifacts {
        Artifacts { dir: self.output_dir.clone() }
    }
}

/// Parses `0.3,0.4+0.2i,0.4-0.2i`.
pub fn parse_poles(text: &str) -> Result<Vec<Complex64>> {
    text.split(',')
        .map(|s| {
            let s = s.trim();
            let bad = || Error::invalid(format!("cannot parse pole '{s}'"));
            if let Some(body) = s.strip_suffix('i') {
                let bytes = body.as_bytes();
                let split = (1..bytes.len())
                    .rev()
                    .find(|&i| matches!(bytes[i], b'+' | b'-') && !matches!(bytes[i - 1], b'e' | b'E'))
                    .ok_or_else(bad)?;
                let re: f64 = body[..split].parse().map_err(|_| bad())?;
                let im_text = &body[split..];
                let im: f64 = if im_text == "+" || im_text == "-" {
                    if im_text == "+" {
                        1.0
                    } else {
                        -1.0
                    }
                } else {
                    im_text.parse().map_err(|_| bad())?
                };
                Ok(Complex64::new(re, im))
            } else {
                Ok(Complex64::new(s.parse().map_err(|_| bad())?, 0.0))
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// artifacts

/// Controller choice for a simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Controller {
    Gain(ControlMethod),
    Open,
}

impl Controller {
    pub fn short(&self) -> &'static str {
        match self {
            Controller::Gain(m) => m.short(),
            Controller::Open => "open",
        }
    }
}

impl std::str::FromStr for Controller {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" | "none" => Ok(Controller::Open),
            other => other.parse().map(Controller::Gain),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunId {
    pub plant: PlantKind,
    pub controller: Controller,
    /// Plant whose reduced model and gain drive the controller.
    pub design_plant: PlantKind,
}

impl RunId {
    pub fn matched(plant: PlantKind, method: ControlMethod) -> Self {
        RunId { plant, controller: Controller::Gain(method), design_plant: plant }
    }

    pub fn name(&self) -> String {
        let base = format!("{}_{}", self.plant, self.controller.short());
        if self.design_plant != self.plant && self.controller != Controller::Open {
            format!("{base}_from_{}", self.design_plant)
        } else {
            base
        }
    }
}

pub const PLANTS: [PlantKind; 2] = [PlantKind::Fd, PlantKind::Surrogate];
pub const METHODS: [ControlMethod; 2] = [ControlMethod::Dlqr, ControlMethod::PolePlacement];

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    fn file(&self, name: impl AsRef<Path>) -> PathBuf {
        self.dir.join(name)
    }
    pub fn resolved_config(&self) -> PathBuf {
        self.file("resolved.cfg")
    }
    pub fn dataset(&self) -> PathBuf {
        self.file("dataset.json")
    }
    pub fn model(&self) -> PathBuf {
        self.file("model.json")
    }
    pub fn training(&self) -> PathBuf {
        self.file("training.json")
    }
    pub fn steady_state(&self, plant: PlantKind) -> PathBuf {
        self.file(format!("steady_{plant}.json"))
    }
    pub fn newton_history(&self, plant: PlantKind) -> PathBuf {
        self.file(format!("newton_{plant}.csv"))
    }
    pub fn spectrum(&self, plant: PlantKind) -> PathBuf {
        self.file(format!("spectrum_{plant}.json"))
    }
    pub fn spectrum_csv(&self, plant: PlantKind) -> PathBuf {
        self.file(format!("spectrum_{plant}.csv"))
    }
    pub fn reduced(&self, plant: PlantKind) -> PathBuf {
        self.file(format!("reduced_{plant}.json"))
    }
    pub fn gain(&self, plant: PlantKind, method: ControlMethod) -> PathBuf {
        self.file(format!("gain_{plant}_{}.json", method.short()))
    }
    pub fn trace(&self, run: &RunId) -> PathBuf {
        self.file(format!("trace_{}.csv", run.name()))
    }
    pub fn snapshots(&self, run: &RunId) -> PathBuf {
        self.file(format!("snapshots_{}.csv", run.name()))
    }
    pub fn run_summary(&self, run: &RunId) -> PathBuf {
        self.file(format!("run_{}.json", run.name()))
    }
    pub fn report_txt(&self) -> PathBuf {
        self.file("report.txt")
    }
    pub fn report_json(&self) -> PathBuf {
        self.file("report.json")
    }

    fn ensure_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|source| Error::Io { path: self.dir.display().to_string(), source })
    }
}

fn load_doc<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = io::read_to_string(path)?;
    io::check_schema(&text, ARTIFACT_SCHEMA_VERSION, what)?;
    io::from_json_str(&text, what)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub schema_version: u32,
    pub samples: usize,
    pub excluded: usize,
    pub trunk_rank: usize,
    pub fit_residual: f64,
    pub holdout_pairs: usize,
    /// Relative one-step errors `||S(u) - target|| / ||target||` on held-out trajectories.
    pub holdout_median: f64,
    pub holdout_p90: f64,
    pub holdout_max: f64,
    /// The same restricted to held-out pairs inside the training domain.
    pub holdout_in_domain_pairs: usize,
    pub holdout_in_domain_median: f64,
    pub holdout_in_domain_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateDoc {
    pub schema_version: u32,
    pub plant: PlantKind,
    pub grid: Grid,
    pub u_ss: Vec<f64>,
    /// `||u - S(u)||_2` at the returned state.
    pub residual: f64,
    pub iterations: usize,
    /// Sup-norm distance to the analytic steady state of the continuous problem.
    pub analytic_gap_inf: f64,
}

impl SteadyStateDoc {
    pub fn u_ss(&self) -> DVector<f64> {
        DVector::from_vec(self.u_ss.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumDoc {
    pub schema_version: u32,
    pub plant: PlantKind,
    pub m_k: usize,
    pub start_seed: u64,
    pub ritz_values: Vec<Complex64>,
    pub ritz_residuals: Vec<f64>,
    /// Ritz values with modulus above one.
    pub unstable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub name: String,
    pub plant: PlantKind,
    pub controller: String,
    pub design_plant: PlantKind,
    pub steps: usize,
    pub final_l2_error: f64,
    pub min_l2_error: f64,
    pub first_below_converged: Option<usize>,
    /// Largest step-to-step increase of the error over the last 20% of the run.
    pub tail_max_increase: f64,
    pub max_bz_absmax: f64,
    pub diverged: bool,
}

impl RunSummary {
    fn from_trace(run: &RunId, trace: &ClosedLoopTrace) -> Self {
        RunSummary {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            name: run.name(),
            plant: run.plant,
            controller: run.controller.short().to_string(),
            design_plant: run.design_plant,
            steps: trace.len().saturating_sub(1),
            final_l2_error: trace.final_error(),
            min_l2_error: trace.l2_error.iter().copied().fold(f64::INFINITY, f64::min),
            first_below_converged: trace.first_below(CONVERGED_LEVEL),
            tail_max_increase: trace.tail_max_increase(0.2),
            max_bz_absmax: trace.bz_absmax.iter().copied().fold(0.0, f64::max),
            diverged: trace.diverged,
        }
    }
}

// ---------------------------------------------------------------------------
// stages

pub fn gen_data(cfg: &PipelineConfig) -> Result<Summary> {
    let art = cfg.artifacts();
    art.ensure_dir()?;
    let plant = cfg.plant_config()?;
    let ds = generate_training_pairs(&plant, &cfg.datagen.spec, cfg.datagen.seed)?;
    ds.save(&art.dataset())?;
    Ok(Summary::new(Stage::GenData)
        .with("pairs", ds.len())
        .with("trajectories", ds.provenance.trajectory_offsets.len())
        .with("truncated", ds.provenance.truncated.len())
        .with("max_abs", fmt_f64(ds.max_abs()))
        .with("path", art.dataset().display()))
}

fn relative_errors(model: &RandONetModel, ds: &SnapshotDataset, idx: &[usize]) -> Result<Vec<f64>> {
    let mut errs = idx
        .iter()
        .map(|&i| Ok((model.predict_raw(&ds.inputs[i])? - &ds.targets[i]).norm() / ds.targets[i].norm()))
        .collect::<Result<Vec<f64>>>()?;
    errs.sort_by(f64::total_cmp);
    Ok(errs)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

pub fn train(cfg: &PipelineConfig) -> Result<Summary> {
    let art = cfg.artifacts();
    let ds = SnapshotDataset::load(&art.dataset())?;
    let grid = ds.grid;
    let (train_idx, test_idx) = ds.split_holdout(cfg.model.holdout_fraction);
    let train_set = ds.subset(&train_idx);
    let (trunk, branch) = init_embeddings(grid.m, &cfg.model.embedding, (grid.x_lo, grid.x_hi))?;
    let model = train_bilinear_lsq(&train_set, trunk, branch, &cfg.model.regularization())?;
    model.save(&art.model())?;

    let test_set = ds.subset(&test_idx);
    let all: Vec<usize> = (0..test_set.len()).collect();
    let errs = relative_errors(&model, &test_set, &all)?;
    let inside = relative_errors(&model, &test_set, &model.in_domain(&test_set))?;
    let report = TrainingReport {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        samples: model.meta.samples,
        excluded: model.meta.excluded,
        trunk_rank: model.meta.trunk_rank,
        fit_residual: model.meta.fit_residual,
        holdout_pairs: errs.len(),
        holdout_median: quantile(&errs, 0.5),
        holdout_p90: quantile(&errs, 0.9),
        holdout_max: errs.last().copied().unwrap_or(f64::NAN),
        holdout_in_domain_pairs: inside.len(),
        holdout_in_domain_median: quantile(&inside, 0.5),
        holdout_in_domain_max: inside.last().copied().unwrap_or(f64::NAN),
    };
    io::write_json(&art.training(), &report)?;
    Ok(Summary::new(Stage::Train)
        .with("samples", report.samples)
        .with("excluded", report.excluded)
        .with("fit_residual", fmt_f64(report.fit_residual))
        .with("holdout_median", fmt_f64(report.holdout_median))
        .with("path", art.model().display()))
}

fn steady_state_with(stepper: &impl Stepper, cfg: &PipelineConfig, plant: PlantKind, grid: Grid) -> Result<SteadyStateDoc> {
    let (_, guess) = analytic_steady_state(cfg.plant.lambda, Branch::Upper, &grid)?;
    let opts = match plant {
        PlantKind::Fd => &cfg.newton.fd,
        PlantKind::Surrogate => &cfg.newton.surrogate,
    };
    let report = newton_krylov_fixed_point(stepper, guess.values(), opts)?;
    let art = cfg.artifacts();
    io::write_atomic(&art.newton_history(plant), report.to_csv().as_bytes())?;
    Ok(SteadyStateDoc {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        plant,
        grid,
        analytic_gap_inf: (&report.solution - guess.values()).amax(),
        u_ss: report.solution.iter().copied().collect(),
        residual: report.residual(),
        iterations: report.iterations,
    })
}

pub fn steady_state(cfg: &PipelineConfig, plant: PlantKind) -> Result<Summary> {
    let art = cfg.artifacts();
    art.ensure_dir()?;
    let doc = match plant {
        PlantKind::Fd => {
            let fd = cfg.fd_plant()?;
            steady_state_with(&fd, cfg, plant, fd.cfg.grid)?
        }
        PlantKind::Surrogate => {
            let model = RandONetModel::load(&art.model())?;
            steady_state_with(&model, cfg, plant, model.grid)?
        }
    };
    io::write_json(&art.steady_state(plant), &doc)?;
    Ok(Summary::new(Stage::SteadyState)
        .with("plant", plant)
        .with("residual", fmt_f64(doc.residual))
        .with("iterations", doc.iterations)
        .with("analytic_gap_inf", fmt_f64(doc.analytic_gap_inf))
        .with("path", art.steady_state(plant).display()))
}

fn load_steady(art: &Artifacts, plant: PlantKind) -> Result<SteadyStateDoc> {
    load_doc(&art.steady_state(plant), "steady state")
}

fn spectrum_with(stepper: &impl Stepper, cfg: &PipelineConfig, plant: PlantKind, u_ss: DVector<f64>) -> Result<SpectrumDoc> {
    let r = &cfg.reduction;
    let n = u_ss.len();
    let jac = JacobianOperator::new(stepper, u_ss, r.eps)?;
    let ar = arnoldi(&jac, &start_vector(n, r.start_seed), r.m_k)?;
    Ok(SpectrumDoc {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        plant,
        m_k: r.m_k,
        start_seed: r.start_seed,
        unstable: ar.ritz_values.iter().filter(|v| v.norm() > 1.0).count(),
        ritz_values: ar.ritz_values,
        ritz_residuals: ar.ritz_residuals,
    })
}

pub fn spectrum(cfg: &PipelineConfig, plant: PlantKind) -> Result<Summary> {
    let art = cfg.artifacts();
    let ss = load_steady(&art, plant)?;
    let doc = match plant {
        PlantKind::Fd => spectrum_with(&cfg.fd_plant()?, cfg, plant, ss.u_ss())?,
        PlantKind::Surrogate => spectrum_with(&RandONetModel::load(&art.model())?, cfg, plant, ss.u_ss())?,
    };
    io::write_json(&art.spectrum(plant), &doc)?;
    let mut csv = String::from("index,re,im,modulus,residual\n");
    for (i, (v, r)) in doc.ritz_values.iter().zip(&doc.ritz_residuals).enumerate() {
        let _ = writeln!(csv, "{i},{},{},{},{}", fmt_f64(v.re), fmt_f64(v.im), fmt_f64(v.norm()), fmt_f64(*r));
    }
    io::write_atomic(&art.spectrum_csv(plant), csv.as_bytes())?;
    Ok(Summary::new(Stage::Spectrum)
        .with("plant", plant)
        .with("leading", fmt_f64(doc.ritz_values[0].norm()))
        .with("unstable", doc.unstable)
        .with("path", art.spectrum(plant).display()))
}

pub fn reduce(cfg: &PipelineConfig, plant: PlantKind) -> Result<Summary> {
    let art = cfg.artifacts();
    let ss = load_steady(&art, plant)?;
    let u_ss = ss.u_ss();
    let r = &cfg.reduction;
    let model = match plant {
        PlantKind::Fd => {
            let fd = cfg.fd_plant()?;
            let h = actuator_jacobian_fd(&fd, &u_ss, r.h_eps)?;
            build_reduced_model(&fd, plant, fd.cfg.grid, &u_ss, h, Some(r.h_eps), r)?
        }
        PlantKind::Surrogate => {
            let net = RandONetModel::load(&art.model())?;
            let h = actuator_jacobian_surrogate(&cfg.actuator_set(&net.grid)?);
            build_reduced_model(&net, plant, net.grid, &u_ss, h, None, r)?
        }
    };
    model.save(&art.reduced(plant))?;
    let eigs = crate::krylov::dense::eigenvalues(&model.f);
    Ok(Summary::new(Stage::Reduce)
        .with("plant", plant)
        .with("m_slow", model.m_slow())
        .with("d_mode", model.d_mode)
        .with("eig_f", format_complex_list(&eigs))
        .with("path", art.reduced(plant).display()))
}

pub fn design(cfg: &PipelineConfig, plant: PlantKind, method: ControlMethod, poles: Option<&[Complex64]>) -> Result<Summary> {
    let art = cfg.artifacts();
    let reduced = ReducedModel::load(&art.reduced(plant))?;
    let c = &cfg.controllers;
    let mut gain = match method {
        ControlMethod::Dlqr => {
            let spec = LqrSpec::scaled_identity(reduced.m_slow(), reduced.k(), c.q_scale, c.r_scale)?;
            dlqr_gain(&reduced.f, &reduced.d, &spec, &c.dare)?
        }
        ControlMethod::PolePlacement => {
            let targets = poles.map(<[Complex64]>::to_vec).unwrap_or_else(|| cfg.target_poles());
            pole_place(&reduced.f, &reduced.d, &targets, c.pole_seed, &c.place)?
        }
    };
    gain.plant = Some(plant);
    gain.save(&art.gain(plant, method))?;
    Ok(Summary::new(Stage::Design)
        .with("plant", plant)
        .with("method", method.short())
        .with("spectral_radius", fmt_f64(gain.spectral_radius()))
        .with("closed_loop_eigs", format_complex_list(&gain.closed_loop_eigs))
        .with("path", art.gain(plant, method).display()))
}

fn run_one(cfg: &PipelineConfig, run: &RunId) -> Result<ClosedLoopTrace> {
    let art = cfg.artifacts();
    let opts = SimOptions { steps: cfg.sim.steps, snapshot_every: cfg.sim.snapshot_every, allow_mismatch: cfg.sim.allow_mismatch };
    let fd;
    let net;
    let act;
    let plant = match run.plant {
        PlantKind::Fd => {
            fd = cfg.fd_plant()?;
            ControlledPlant::Fd(&fd)
        }
        PlantKind::Surrogate => {
            net = RandONetModel::load(&art.model())?;
            act = cfg.actuator_set(&net.grid)?;
            ControlledPlant::Surrogate { model: &net, actuators: &act }
        }
    };
    let initial = |u_ss: &DVector<f64>| -> Result<DVector<f64>> {
        match cfg.sim.initial {
            InitialState::SteadyState => Ok(u_ss.clone()),
            InitialState::Perturbation => {
                let field = crate::field::Field::new(plant.grid(), u_ss.clone())?;
                Ok(initial_perturbation(&field)?.into_values())
            }
        }
    };
    match run.controller {
        Controller::Open => {
            let u_ss = load_steady(&art, run.plant)?.u_ss();
            run_open_loop(&plant, &u_ss, &initial(&u_ss)?, &opts)
        }
        Controller::Gain(method) => {
            let reduced = ReducedModel::load(&art.reduced(run.design_plant))?;
            let gain = ControllerGain::load(&art.gain(run.design_plant, method))?;
            // Errors are measured against the plant's own fixed point.
            let reduced = if run.design_plant == run.plant {
                reduced
            } else {
                ReducedModel { u_ss: load_steady(&art, run.plant)?.u_ss(), ..reduced }
            };
            run_closed_loop(&plant, &reduced, &gain, &initial(&reduced.u_ss)?, &opts)
        }
    }
}

pub fn simulate(cfg: &PipelineConfig, run: &RunId) -> Result<Summary> {
    let art = cfg.artifacts();
    let trace = run_one(cfg, run)?;
    trace.check()?;
    io::write_atomic(&art.trace(run), trace.to_csv().as_bytes())?;
    if cfg.sim.snapshot_every > 0 {
        io::write_atomic(&art.snapshots(run), trace.snapshots_csv().as_bytes())?;
    }
    let summary = RunSummary::from_trace(run, &trace);
    io::write_json(&art.run_summary(run), &summary)?;
    Ok(Summary::new(Stage::Simulate)
        .with("run", run.name())
        .with("steps", summary.steps)
        .with("final_l2_error", fmt_f64(summary.final_l2_error))
        .with("diverged", summary.diverged)
        .with("path", art.trace(run).display()))
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantReport {
    pub plant: PlantKind,
    pub fixed_point_residual: f64,
    pub newton_iterations: usize,
    pub analytic_gap_inf: f64,
    pub leading_ritz: Vec<Complex64>,
    pub unstable_ritz: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerReport {
    pub plant: PlantKind,
    pub method: ControlMethod,
    pub closed_loop_eigs: Vec<Complex64>,
    pub spectral_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub holdout_median: f64,
    pub holdout_p90: f64,
    pub fixed_point_gap_inf: f64,
    pub leading_ritz_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub plants: Vec<PlantReport>,
    pub controllers: Vec<ControllerReport>,
    pub runs: Vec<RunSummary>,
    pub fidelity: Option<FidelityReport>,
}

const REPORT_RITZ: usize = 6;

fn format_complex(v: Complex64) -> String {
    if v.im == 0.0 {
        format!("{:.6}", v.re)
    } else {
        format!("{:.6}{:+.6}i", v.re, v.im)
    }
}

fn format_complex_list(vals: &[Complex64]) -> String {
    vals.iter().map(|v| format_complex(*v)).collect::<Vec<_>>().join(",")
}

fn load_optional<T>(path: &Path, load: impl FnOnce(&Path) -> Result<T>) -> Result<Option<T>> {
    if path.exists() {
        load(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Gathers whatever artifacts exist into a report.
pub fn collect_report(art: &Artifacts) -> Result<Report> {
    let mut plants = Vec::new();
    let mut controllers = Vec::new();
    let mut runs = Vec::new();
    let mut steady = Vec::new();
    let mut spectra = Vec::new();
    for plant in PLANTS {
        let ss = load_optional(&art.steady_state(plant), |p| load_doc::<SteadyStateDoc>(p, "steady state"))?;
        let sp = load_optional(&art.spectrum(plant), |p| load_doc::<SpectrumDoc>(p, "spectrum"))?;
        if let Some(ss) = &ss {
            plants.push(PlantReport {
                plant,
                fixed_point_residual: ss.residual,
                newton_iterations: ss.iterations,
                analytic_gap_inf: ss.analytic_gap_inf,
                leading_ritz: sp.as_ref().map_or(Vec::new(), |s| s.ritz_values.iter().take(REPORT_RITZ).copied().collect()),
                unstable_ritz: sp.as_ref().map_or(0, |s| s.unstable),
            });
        }
        steady.push(ss);
        spectra.push(sp);
        for method in METHODS {
            if let Some(g) = load_optional(&art.gain(plant, method), ControllerGain::load)? {
                controllers.push(ControllerReport {
                    plant,
                    method,
                    spectral_radius: g.spectral_radius(),
                    closed_loop_eigs: g.closed_loop_eigs,
                });
            }
            let run = RunId::matched(plant, method);
            if let Some(r) = load_optional(&art.run_summary(&run), |p| load_doc::<RunSummary>(p, "run summary"))? {
                runs.push(r);
            }
        }
    }
    let training = load_optional(&art.training(), |p| load_doc::<TrainingReport>(p, "training report"))?;
    let fidelity = match (&training, &steady[0], &steady[1], &spectra[0], &spectra[1]) {
        (Some(t), Some(fd), Some(sur), Some(sfd), Some(ssur)) => Some(FidelityReport {
            holdout_median: t.holdout_median,
            holdout_p90: t.holdout_p90,
            fixed_point_gap_inf: (fd.u_ss() - sur.u_ss()).amax(),
            leading_ritz_gap: (sfd.ritz_values[0] - ssur.ritz_values[0]).norm(),
        }),
        _ => None,
    };
    Ok(Report { schema_version: ARTIFACT_SCHEMA_VERSION, plants, controllers, runs, fidelity })
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "equation-free coarse control report\n");
        let _ = writeln!(out, "steady states");
        let _ = writeln!(out, "  {:<10} {:>24} {:>6} {:>24}", "plant", "fixed_point_residual", "iters", "analytic_gap_inf");
        for p in &self.plants {
            let _ = writeln!(
                out,
                "  {:<10} {:>24} {:>6} {:>24}",
                p.plant,
                fmt_f64(p.fixed_point_residual),
                p.newton_iterations,
                fmt_f64(p.analytic_gap_inf)
            );
        }
        let _ = writeln!(out, "\nleading open-loop Ritz values");
        for p in &self.plants {
            let _ = writeln!(out, "  {:<10} unstable={} [{}]", p.plant, p.unstable_ritz, format_complex_list(&p.leading_ritz));
        }
        if let Some(f) = &self.fidelity {
            let _ = writeln!(out, "\nsurrogate fidelity");
            let _ = writeln!(out, "  holdout_median_rel_error  {}", fmt_f64(f.holdout_median));
            let _ = writeln!(out, "  holdout_p90_rel_error     {}", fmt_f64(f.holdout_p90));
            let _ = writeln!(out, "  fixed_point_gap_inf       {}", fmt_f64(f.fixed_point_gap_inf));
            let _ = writeln!(out, "  leading_ritz_gap          {}", fmt_f64(f.leading_ritz_gap));
        }
        let _ = writeln!(out, "\nclosed-loop eigenvalues");
        for c in &self.controllers {
            let _ = writeln!(
                out,
                "  {:<10} {:<5} radius={:.6} [{}]",
                c.plant,
                c.method.short(),
                c.spectral_radius,
                format_complex_list(&c.closed_loop_eigs)
            );
        }
        let _ = writeln!(out, "\nclosed-loop runs");
        let _ = writeln!(
            out,
            "  {:<18} {:>6} {:>24} {:>24} {:>12} {:>9}",
            "run", "steps", "final_l2_error", "min_l2_error", "steps_1e-10", "diverged"
        );
        for r in &self.runs {
            let below = r.first_below_converged.map_or("-".to_string(), |n| n.to_string());
            let _ = writeln!(
                out,
                "  {:<18} {:>6} {:>24} {:>24} {:>12} {:>9}",
                r.name,
                r.steps,
                fmt_f64(r.final_l2_error),
                fmt_f64(r.min_l2_error),
                below,
                r.diverged
            );
        }
        out
    }
}

pub fn report(cfg: &PipelineConfig) -> Result<Summary> {
    let art = cfg.artifacts();
    art.ensure_dir()?;
    let rep = collect_report(&art)?;
    io::write_json(&art.report_json(), &rep)?;
    io::write_atomic(&art.report_txt(), rep.to_text().as_bytes())?;
    let mut s = Summary::new(Stage::Report).with("plants", rep.plants.len()).with("runs", rep.runs.len());
    for r in &rep.runs {
        s = s.with(&format!("final_{}", r.name), fmt_f64(r.final_l2_error));
    }
    Ok(s.with("path", art.report_txt().display()))
}

/// Every stage in order; the four matched closed-loop runs execute concurrently.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<Vec<Summary>, StageError> {
    let art = cfg.artifacts();
    art.ensure_dir().at(Stage::GenData)?;
    io::write_atomic(&art.resolved_config(), cfg.to_toml().at(Stage::GenData)?.as_bytes()).at(Stage::GenData)?;
    let mut out = Vec::new();
    let mut log_push = |s: Summary| {
        log::info!("{s}");
        out.push(s);
    };
    log_push(gen_data(cfg).at(Stage::GenData)?);
    log_push(train(cfg).at(Stage::Train)?);
    for plant in PLANTS {
        log_push(steady_state(cfg, plant).at(Stage::SteadyState)?);
    }
    for plant in PLANTS {
        log_push(spectrum(cfg, plant).at(Stage::Spectrum)?);
    }
    for plant in PLANTS {
        log_push(reduce(cfg, plant).at(Stage::Reduce)?);
    }
    for plant in PLANTS {
        for method in METHODS {
            log_push(design(cfg, plant, method, None).at(Stage::Design)?);
        }
    }
    let runs: Vec<RunId> = PLANTS.iter().flat_map(|&p| METHODS.iter().map(move |&m| RunId::matched(p, m))).collect();
    let sims: Vec<Result<Summary>> = runs.par_iter().map(|run| simulate(cfg, run)).collect();
    for s in sims {
        log_push(s.at(Stage::Simulate)?);
    }
    log_push(report(cfg).at(Stage::Report)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = PipelineConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(text.contains("r_scale"));
        assert!(text.contains("seed"));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = PipelineConfig::from_toml_str("output_dir = \"x\"\n[sim]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.sim.steps, 10);
        assert_eq!(cfg.sim.snapshot_every, 10);
        assert_eq!(cfg.controllers.r_scale, 10.0 * 1e-3 * 1e-3);
        assert_eq!(cfg.output_dir, PathBuf::from("x"));
    }

    #[test]
    fn config_errors() {
        assert!(matches!(PipelineConfig::from_toml_str("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml_str("[reduction]\nm_slow = 60\n"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml_str("[plant]\ndt_inner = 1.0\n"), Err(Error::Config(_))));
    }

    #[test]
    fn complex_poles_in_config_and_cli() {
        let cfg = PipelineConfig::from_toml_str("[controllers]\npoles = [0.3, [0.4, 0.2], [0.4, -0.2]]\n").unwrap();
        assert_eq!(cfg.target_poles()[1], Complex64::new(0.4, 0.2));
        let p = parse_poles("0.30, 0.4+0.2i,0.4-0.2i,-0.1,1e-1-2e-1i").unwrap();
        assert_eq!(p[0], Complex64::new(0.3, 0.0));
        assert_eq!(p[2], Complex64::new(0.4, -0.2));
        assert_eq!(p[3], Complex64::new(-0.1, 0.0));
        assert_eq!(p[4], Complex64::new(0.1, -0.2));
        assert!(parse_poles("0.3,abc").is_err());
    }

    #[test]
    fn run_names() {
        assert_eq!(RunId::matched(PlantKind::Fd, ControlMethod::Dlqr).name(), "fd_dlqr");
        let cross =
            RunId { plant: PlantKind::Surrogate, controller: Controller::Gain(ControlMethod::PolePlacement), design_plant: PlantKind::Fd };
        assert_eq!(cross.name(), "surrogate_pp_from_fd");
        assert_eq!("open".parse::<Controller>().unwrap(), Controller::Open);
    }
}
