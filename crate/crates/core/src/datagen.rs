//! Snapshot pairs `(u_n, u_{n+1})` from uncontrolled reference trajectories.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Grid};
use crate::io;
use crate::plant::{analytic_steady_state, integrate, Branch, PlantConfig};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Family of initial conditions for training trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitialConditionFamily {
    /// `a · u_upper(x) + Σ_j c_j sin(jπx)` with `a ~ U[0, amp_max]`, `c_j ~ U[-mode_amp, mode_amp] / j`.
    SteadyStateMix { amp_max: f64, modes: usize, mode_amp: f64 },
    /// The analytic upper steady state, unperturbed.
    SteadyState,
}

impl Default for InitialConditionFamily {
    fn default() -> Self {
        InitialConditionFamily::SteadyStateMix { amp_max: 1.3, modes: 8, mode_amp: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataGenSpec {
    pub trajectories: usize,
    pub steps: usize,
    pub burn_in: usize,
    pub ic: InitialConditionFamily,
    /// Trajectories are cut at the first state whose sup-norm exceeds this.
    pub overflow_guard: f64,
    /// How many pairs are re-integrated to confirm they match the plant.
    pub verify_pairs: usize,
}

impl Default for DataGenSpec {
    fn default() -> Self {
        DataGenSpec {
            trajectories: 200,
            steps: 100,
            burn_in: 10,
            ic: InitialConditionFamily::default(),
            overflow_guard: 1e3,
            verify_pairs: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProvenance {
    pub plant: PlantConfig,
    pub spec: DataGenSpec,
    pub seed: u64,
    /// Trajectory indices cut short by the overflow guard.
    pub truncated: Vec<usize>,
    /// First pair index of every trajectory, in order.
    pub trajectory_offsets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDataset {
    pub grid: Grid,
    pub dt_report: f64,
    pub inputs: Vec<DVector<f64>>,
    pub targets: Vec<DVector<f64>>,
    pub provenance: DatasetProvenance,
}

impl SnapshotDataset {
    /// Wraps externally produced pairs as a single trajectory.
    pub fn from_pairs(plant: PlantConfig, inputs: Vec<DVector<f64>>, targets: Vec<DVector<f64>>) -> Result<Self> {
        let steps = inputs.len();
        let ds = SnapshotDataset {
            grid: plant.grid,
            dt_report: plant.dt_report,
            inputs,
            targets,
            provenance: DatasetProvenance {
                plant,
                spec: DataGenSpec { trajectories: 1, steps, burn_in: 0, verify_pairs: 0, ..DataGenSpec::default() },
                seed: 0,
                truncated: Vec::new(),
                trajectory_offsets: vec![0],
            },
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.inputs.iter().chain(&self.targets).map(|v| v.amax()).fold(0.0, f64::max)
    }

    /// Pairs belonging to trajectory `t`.
    pub fn trajectory_range(&self, t: usize) -> std::ops::Range<usize> {
        let offs = &self.provenance.trajectory_offsets;
        let end = offs.get(t + 1).copied().unwrap_or(self.len());
        offs[t]..end
    }

    /// Splits by whole trajectories: every `1/holdout_fraction`-th trajectory is held out.
    pub fn split_holdout(&self, holdout_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let ntraj = self.provenance.trajectory_offsets.len();
        let mut train = Vec::new();
        let mut test = Vec::new();
        if !(holdout_fraction > 0.0) || ntraj < 2 {
            return ((0..self.len()).collect(), test);
        }
        let stride = (1.0 / holdout_fraction).round().max(2.0) as usize;
        for t in 0..ntraj {
            let dest = if t % stride == stride - 1 { &mut test } else { &mut train };
            dest.extend(self.trajectory_range(t));
        }
        (train, test)
    }

    pub fn subset(&self, idx: &[usize]) -> SnapshotDataset {
        SnapshotDataset {
            grid: self.grid,
            dt_report: self.dt_report,
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            provenance: DatasetProvenance { trajectory_offsets: vec![0], ..self.provenance.clone() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() || self.inputs.len() != self.targets.len() {
            return Err(Error::invalid(format!(
                "dataset needs matching nonempty inputs/targets, got {} and {}",
                self.inputs.len(),
                self.targets.len()
            )));
        }
        for v in self.inputs.iter().chain(&self.targets) {
            self.grid.check_len(v.len(), "dataset sample")?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("dataset sample".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &DatasetDoc::from(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        io::check_schema(&text, DATASET_SCHEMA_VERSION, "dataset")?;
        let doc: DatasetDoc = io::from_json_str(&text, "dataset")?;
        doc.into_dataset()
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetDoc {
    schema_version: u32,
    grid: Grid,
    dt_report: f64,
    seed: u64,
    provenance: DatasetProvenance,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

impl From<&SnapshotDataset> for DatasetDoc {
    fn from(d: &SnapshotDataset) -> Self {
        DatasetDoc {
            schema_version: DATASET_SCHEMA_VERSION,
            grid: d.grid,
            dt_report: d.dt_report,
            seed: d.provenance.seed,
            provenance: d.provenance.clone(),
            inputs: d.inputs.iter().map(io::vec_to_doc).collect(),
            targets: d.targets.iter().map(io::vec_to_doc).collect(),
        }
    }
}

impl DatasetDoc {
    fn into_dataset(self) -> Result<SnapshotDataset> {
        let ds = SnapshotDataset {
            grid: self.grid,
            dt_report: self.dt_report,
            inputs: self.inputs.into_iter().map(DVector::from_vec).collect(),
            targets: self.targets.into_iter().map(DVector::from_vec).collect(),
            provenance: self.provenance,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn initial_condition(grid: &Grid, lambda: f64, family: &InitialConditionFamily, rng: &mut impl Rng) -> Result<DVector<f64>> {
    let (_, upper) = analytic_steady_state(lambda, Branch::Upper, grid)?;
    let x = grid.nodes();
    let mut u = match *family {
        InitialConditionFamily::SteadyState => upper.values().clone(),
        InitialConditionFamily::SteadyStateMix { amp_max, modes, mode_amp } => {
            let a = rng.random_range(0.0..=amp_max);
            let coeffs: Vec<f64> = (1..=modes).map(|j| rng.random_range(-mode_amp..=mode_amp) / j as f64).collect();
            DVector::from_fn(grid.m, |i, _| {
                let mut v = a * upper.values()[i];
                for (j, c) in coeffs.iter().enumerate() {
                    v += c * ((j + 1) as f64 * std::f64::consts::PI * x[i]).sin();
                }
                v
            })
        }
    };
    let last = grid.m - 1;
    u[0] = 0.0;
    u[last] = 0.0;
    Ok(u)
}

struct Trajectory {
    inputs: Vec<DVector<f64>>,
    targets: Vec<DVector<f64>>,
    truncated: bool,
}

fn run_trajectory(cfg: &PlantConfig, gen: &DataGenSpec, seed: u64, index: usize) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut u = initial_condition(&cfg.grid, cfg.lambda, &gen.ic, &mut rng)?;
    let substeps = cfg.substeps();
    let blown = |v: &DVector<f64>| !(v.amax() <= gen.overflow_guard);
    let mut out = Trajectory { inputs: Vec::with_capacity(gen.steps), targets: Vec::with_capacity(gen.steps), truncated: false };
    for _ in 0..gen.burn_in {
        u = DVector::from_vec(integrate(u.as_slice(), cfg, None, substeps));
        if blown(&u) {
            out.truncated = true;
            return Ok(out);
        }
    }
    for _ in 0..gen.steps {
        let next = DVector::from_vec(integrate(u.as_slice(), cfg, None, substeps));
        if blown(&next) {
            out.truncated = true;
            break;
        }
        out.inputs.push(u);
        out.targets.push(next.clone());
        u = next;
    }
    Ok(out)
}

/// Deterministic in `seed`: trajectory `i` draws from ChaCha stream `i`, and
/// results are assembled in trajectory order whatever the thread count.
pub fn generate_training_pairs(cfg: &PlantConfig, gen: &DataGenSpec, seed: u64) -> Result<SnapshotDataset> {
    cfg.validate()?;
    if gen.trajectories == 0 || gen.steps == 0 {
        return Err(Error::invalid("data generation needs at least one trajectory and one step"));
    }
    let trajs: Vec<Trajectory> = (0..gen.trajectories).into_par_iter().map(|i| run_trajectory(cfg, gen, seed, i)).collect::<Result<_>>()?;

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut truncated = Vec::new();
    let mut offsets = Vec::new();
    for (i, t) in trajs.into_iter().enumerate() {
        if t.truncated {
            log::warn!("trajectory {i} exceeded the overflow guard and was truncated");
            truncated.push(i);
        }
        offsets.push(inputs.len());
        inputs.extend(t.inputs);
        targets.extend(t.targets);
    }
    if inputs.is_empty() {
        return Err(Error::invalid("every trajectory blew up before producing a pair"));
    }

    // Spot-check pairs spread evenly through the dataset.
    let n = inputs.len();
    let checks = gen.verify_pairs.min(n);
    for c in 0..checks {
        let i = c * n / checks.max(1);
        let again = integrate(inputs[i].as_slice(), cfg, None, cfg.substeps());
        if again.as_slice() != targets[i].as_slice() {
            return Err(Error::invalid(format!("pair {i} does not reproduce under the plant")));
        }
    }

    Ok(SnapshotDataset {
        grid: cfg.grid,
        dt_report: cfg.dt_report,
        inputs,
        targets,
        provenance: DatasetProvenance { plant: *cfg, spec: *gen, seed, truncated, trajectory_offsets: offsets },
    })
}

/// Convenience: a dataset as nodal fields.
pub fn to_fields(grid: &Grid, values: &[DVector<f64>]) -> Result<Vec<Field>> {
    values.iter().map(|v| Field::new(*grid, v.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DataGenSpec {
        DataGenSpec { trajectories: 6, steps: 5, burn_in: 2, ..Default::default() }
    }

    #[test]
    fn steady_state_ic_gives_near_fixed_pair() {
        let cfg = PlantConfig::bratu_default();
        let gen = DataGenSpec { trajectories: 1, steps: 1, burn_in: 0, ic: InitialConditionFamily::SteadyState, ..Default::default() };
        let ds = generate_training_pairs(&cfg, &gen, 7).unwrap();
        assert_eq!(ds.len(), 1);
        // The analytic state is an O(h^2) approximation of the discrete fixed point.
        assert!((&ds.targets[0] - &ds.inputs[0]).amax() < 1e-4);
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = PlantConfig::bratu_default();
        let a = generate_training_pairs(&cfg, &small_spec(), 11).unwrap();
        let b = generate_training_pairs(&cfg, &small_spec(), 11).unwrap();
        assert_eq!(a, b);
        let c = generate_training_pairs(&cfg, &small_spec(), 12).unwrap();
        assert_ne!(a.inputs, c.inputs);
    }

    #[test]
    fn pairs_are_consecutive_and_dirichlet() {
        let cfg = PlantConfig::bratu_default();
        let ds = generate_training_pairs(&cfg, &small_spec(), 3).unwrap();
        assert_eq!(ds.len(), 30);
        for t in 0..6 {
            let r = ds.trajectory_range(t);
            for i in r.start..r.end - 1 {
                assert_eq!(ds.targets[i], ds.inputs[i + 1]);
            }
        }
        for v in ds.inputs.iter().chain(&ds.targets) {
            assert_eq!(v[0], 0.0);
            assert_eq!(v[50], 0.0);
        }
    }

    #[test]
    fn blow_up_is_truncated_and_flagged() {
        let cfg = PlantConfig::bratu_default();
        let gen = DataGenSpec {
            trajectories: 2,
            steps: 50,
            burn_in: 0,
            overflow_guard: 1.0,
            ic: InitialConditionFamily::SteadyState,
            ..Default::default()
        };
        // The upper state peaks near 2.9, so the guard trips immediately.
        assert!(generate_training_pairs(&cfg, &gen, 0).is_err());
        let gen = DataGenSpec {
            overflow_guard: 3.0,
            ic: InitialConditionFamily::SteadyStateMix { amp_max: 1.3, modes: 8, mode_amp: 0.5 },
            trajectories: 20,
            ..gen
        };
        let ds = generate_training_pairs(&cfg, &gen, 5).unwrap();
        assert!(!ds.provenance.truncated.is_empty());
        assert!(ds.max_abs() <= 3.0);
    }

    #[test]
    fn holdout_split_by_trajectory() {
        let cfg = PlantConfig::bratu_default();
        let ds = generate_training_pairs(&cfg, &DataGenSpec { trajectories: 10, ..small_spec() }, 1).unwrap();
        let (train, test) = ds.split_holdout(0.1);
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!(test, ds.trajectory_range(9).collect::<Vec<_>>());
    }

    #[test]
    fn save_load_roundtrip() {
        let cfg = PlantConfig::bratu_default();
        let ds = generate_training_pairs(&cfg, &small_spec(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        ds.save(&path).unwrap();
        assert_eq!(SnapshotDataset::load(&path).unwrap(), ds);

        let text = std::fs::read_to_string(&path).unwrap().replacen("\"schema_version\":1", "\"schema_version\":9", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(SnapshotDataset::load(&path), Err(Error::Schema { expected: 1, found: 9 })));
    }
}
