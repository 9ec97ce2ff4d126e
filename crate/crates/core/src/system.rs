//! Nonlinear state-space models, the two-dimensional benchmark system, and
//! trajectory simulation.
//!
//! A model evolves as `x_k = f(x_{k-1}) + w_k` and is observed through
//! `y_k = h(x_k) + v_k`, with `w_k ~ N(0, Q)` and `v_k ~ N(0, R)`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_symmetric_psd, noise_factor};
use crate::rng::{derive_seed, seeded};

/// A discrete-time nonlinear system with additive Gaussian noise.
pub trait StateSpaceModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    /// The state-transition map `f`.
    fn transition(&self, x: &DVector<f64>) -> DVector<f64>;
    /// The observation map `h`.
    fn observe(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Jacobian of `f` at `x` (`m × m`).
    fn transition_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Jacobian of `h` at `x` (`n × m`).
    fn observation_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn process_noise(&self) -> &DMatrix<f64>;
    fn observation_noise(&self) -> &DMatrix<f64>;
}

/// Checks that `Q` and `R` are symmetric PSD with dimensions matching the model.
pub fn validate_model(model: &dyn StateSpaceModel) -> Result<()> {
    let (m, n) = (model.state_dim(), model.obs_dim());
    if m == 0 || n == 0 {
        return Err(Error::InvalidModel("state and observation dimensions must be positive".into()));
    }
    let q = model.process_noise();
    let r = model.observation_noise();
    if q.shape() != (m, m) {
        return Err(Error::InvalidModel(format!("Q is {:?}, expected {m}x{m}", q.shape())));
    }
    if r.shape() != (n, n) {
        return Err(Error::InvalidModel(format!("R is {:?}, expected {n}x{n}", r.shape())));
    }
    if !is_symmetric_psd(q, 1e-10) {
        return Err(Error::InvalidModel("Q is not symmetric positive semidefinite".into()));
    }
    if !is_symmetric_psd(r, 1e-10) {
        return Err(Error::InvalidModel("R is not symmetric positive semidefinite".into()));
    }
    Ok(())
}

/// Parameters of the benchmark system
/// `f(x) = α·sin(β·x + φ) + δ`, `h(x) = a·(b·x + c)²`, applied per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
    pub delta: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl SynthParams {
    /// The true system.
    pub const TRUE_SYSTEM: SynthParams =
        SynthParams { alpha: 0.9, beta: 1.1, phi: 0.1 * PI, delta: 0.01, a: 1.0, b: 1.0, c: 0.0 };

    /// The simplified model used by a mismatched filter.
    pub const MISMATCHED: SynthParams =
        SynthParams { alpha: 1.0, beta: 1.0, phi: 0.0, delta: 0.0, a: 1.0, b: 1.0, c: 0.0 };
}

pub fn synth_f(p: &SynthParams, x: &DVector<f64>) -> DVector<f64> {
    x.map(|v| p.alpha * (p.beta * v + p.phi).sin() + p.delta)
}

pub fn synth_h(p: &SynthParams, x: &DVector<f64>) -> DVector<f64> {
    x.map(|v| p.a * (p.b * v + p.c).powi(2))
}

pub fn synth_jac_f(p: &SynthParams, x: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&x.map(|v| p.alpha * p.beta * (p.beta * v + p.phi).cos()))
}

pub fn synth_jac_h(p: &SynthParams, x: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&x.map(|v| 2.0 * p.a * p.b * (p.b * v + p.c)))
}

/// The elementwise benchmark system of dimension `dim` with noise `Q`, `R`.
#[derive(Debug, Clone)]
pub struct SynthModel {
    pub params: SynthParams,
    dim: usize,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl SynthModel {
    pub fn new(params: SynthParams, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let model = SynthModel { params, dim: q.nrows(), q, r };
        validate_model(&model)?;
        Ok(model)
    }

    /// Isotropic noise `Q = q²·I`, `R = r²·I`.
    pub fn isotropic(params: SynthParams, dim: usize, q2: f64, r2: f64) -> Result<Self> {
        Self::new(
            params,
            DMatrix::identity(dim, dim) * q2,
            DMatrix::identity(dim, dim) * r2,
        )
    }
}

impl StateSpaceModel for SynthModel {
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn obs_dim(&self) -> usize {
        self.dim
    }
    fn transition(&self, x: &DVector<f64>) -> DVector<f64> {
        synth_f(&self.params, x)
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        synth_h(&self.params, x)
    }
    fn transition_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        synth_jac_f(&self.params, x)
    }
    fn observation_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        synth_jac_h(&self.params, x)
    }
    fn process_noise(&self) -> &DMatrix<f64> {
        &self.q
    }
    fn observation_noise(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// `x_k = A x_{k-1} + w_k`, `y_k = C x_k + v_k`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || c.ncols() != a.nrows() {
            return Err(Error::Dimension(format!(
                "A is {:?} and C is {:?}",
                a.shape(),
                c.shape()
            )));
        }
        let model = LinearModel { a, c, q, r };
        validate_model(&model)?;
        Ok(model)
    }
}

impl StateSpaceModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn obs_dim(&self) -> usize {
        self.c.nrows()
    }
    fn transition(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }
    fn transition_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }
    fn observation_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.c.clone()
    }
    fn process_noise(&self) -> &DMatrix<f64> {
        &self.q
    }
    fn observation_noise(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// True states `x_1..x_L` and their observations `y_1..y_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn gaussian(rng: &mut crate::rng::Rng, factor: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(factor.ncols(), |_, _| StandardNormal.sample(rng));
    factor * z
}

/// Simulates `len` steps from the initial state `x0` (which is not itself
/// recorded). Per step the process noise is drawn before the observation noise.
pub fn simulate_trajectory(
    model: &dyn StateSpaceModel,
    x0: &DVector<f64>,
    len: usize,
    seed: u64,
) -> Result<Trajectory> {
    validate_model(model)?;
    if len == 0 {
        return Err(Error::Config("trajectory length must be at least 1".into()));
    }
    if x0.len() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "initial state has {} entries, model state dimension is {}",
            x0.len(),
            model.state_dim()
        )));
    }
    let sq = noise_factor(model.process_noise())?;
    let sr = noise_factor(model.observation_noise())?;
    let mut rng = seeded(seed);
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(len);
    let mut observations = Vec::with_capacity(len);
    for _ in 0..len {
        let w = gaussian(&mut rng, &sq);
        x = model.transition(&x) + w;
        let v = gaussian(&mut rng, &sr);
        observations.push(model.observe(&x) + v);
        states.push(x.clone());
    }
    Ok(Trajectory { states, observations })
}

/// The noise-free rollout `f(x0), f(f(x0)), …` of length `len`.
pub fn noise_free_trajectory(
    model: &dyn StateSpaceModel,
    x0: &DVector<f64>,
    len: usize,
) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(len);
    let mut x = x0.clone();
    for _ in 0..len {
        x = model.transition(&x);
        out.push(x.clone());
    }
    out
}

/// Provenance recorded alongside a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub l: usize,
    pub m: usize,
    pub obs_dim: usize,
    pub q2: f64,
    pub r2: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub instances: Vec<Trajectory>,
}

/// `N` independent trajectories; instance `i` uses sub-seed `derive_seed(seed, i)`.
///
/// `q2`/`r2` in the metadata are the mean diagonal entries of `Q`/`R`, which
/// are exact for the isotropic noise used throughout the experiments.
pub fn generate_dataset(
    model: &dyn StateSpaceModel,
    x0: &DVector<f64>,
    n: usize,
    len: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset must contain at least one instance".into()));
    }
    let instances = (0..n as u64)
        .into_par_iter()
        .map(|i| simulate_trajectory(model, x0, len, derive_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let q = model.process_noise();
    let r = model.observation_noise();
    Ok(Dataset {
        meta: DatasetMeta {
            n,
            l: len,
            m: model.state_dim(),
            obs_dim: model.obs_dim(),
            q2: q.trace() / q.nrows() as f64,
            r2: r.trace() / r.nrows() as f64,
            seed,
        },
        instances,
    })
}

// On-disk layout: {"meta": {...}, "instances": [{"x": [[..]], "y": [[..]]}]}.
// serde_json writes the shortest decimal that round-trips each f64 exactly.

#[derive(Serialize, Deserialize)]
pub(crate) struct TrajectoryFile {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    meta: DatasetMeta,
    instances: Vec<TrajectoryFile>,
}

pub(crate) fn rows(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().copied().collect()).collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>]) -> Vec<DVector<f64>> {
    rows.iter().map(|r| DVector::from_column_slice(r)).collect()
}

impl From<&Trajectory> for TrajectoryFile {
    fn from(t: &Trajectory) -> Self {
        TrajectoryFile { x: rows(&t.states), y: rows(&t.observations) }
    }
}

impl Dataset {
    pub fn to_json(&self) -> String {
        let file = DatasetFile {
            meta: self.meta.clone(),
            instances: self.instances.iter().map(TrajectoryFile::from).collect(),
        };
        serde_json::to_string(&file).expect("dataset serialization cannot fail")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let file: DatasetFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let instances: Vec<Trajectory> = file
            .instances
            .iter()
            .map(|t| Trajectory { states: from_rows(&t.x), observations: from_rows(&t.y) })
            .collect();
        let meta = file.meta;
        if instances.len() != meta.n {
            return Err(format!("meta.n = {} but {} instances", meta.n, instances.len()));
        }
        for (i, t) in instances.iter().enumerate() {
            let ok = t.states.len() == meta.l
                && t.observations.len() == meta.l
                && t.states.iter().all(|x| x.len() == meta.m)
                && t.observations.iter().all(|y| y.len() == meta.obs_dim);
            if !ok {
                return Err(format!("instance {i} does not match the declared shape"));
            }
        }
        Ok(Dataset { meta, instances })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|message| Error::Format { path: path.into(), message })
    }
}
