//! Batch (whole-trajectory) estimation over a linear time-varying model.
//!
//! With `x = [x_1; …; x_L]`, the stacked measurement model `z = H x + e`,
//! `e ~ N(0, W)`, has
//!
//! ```text
//! z = [x̌_1; u_2; …; u_L; ȳ_1; …; ȳ_L]
//!
//!     ⎡  I               ⎤
//!     ⎢ −A_1   I          ⎥
//! H = ⎢       ⋱    ⋱      ⎥      W = blockdiag(P̌_1, Q_2, …, Q_L, R_1, …, R_L)
//!     ⎢       −A_{L-1}  I ⎥
//!     ⎣ blockdiag(C_1, …, C_L) ⎦
//! ```
//!
//! and the estimate solves `(HᵀW⁻¹H) x̂ = HᵀW⁻¹z`. The result is the same as a
//! forward Kalman filter followed by a Rauch-Tung-Striebel smoother.
//!
//! The same module turns batch estimates into supervised pre-training
//! samples for the gain network.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atkf::FeatureWindow;
use crate::error::{Error, Result};
use crate::filters::GaussianBelief;
use crate::linalg::{cholesky_lower, cholesky_solve, spd_inverse};
use crate::ltpwl::LtpwlSystem;
use crate::nn::{NetConfig, Tensor};
use crate::system::{from_rows, rows, DatasetMeta, StateSpaceModel, Trajectory, TrajectoryFile};

/// One step of `x_{k+1} = A_k x_k + u_{k+1} + w`, `ȳ_k = C_k x_k + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvStep {
    /// `A_k`
    pub transition: DMatrix<f64>,
    /// `C_k`
    pub observation: DMatrix<f64>,
    /// `u_{k+1}`, the offset of the transition out of step `k`.
    pub offset: DVector<f64>,
    /// `ȳ_k = y_k − (h(x_k) − C_k x_k)`
    pub shifted_observation: DVector<f64>,
}

/// Linearizes along the true states using the active lattice segment of each component.
pub fn ltv_steps(
    system: &LtpwlSystem,
    states: &[DVector<f64>],
    observations: &[DVector<f64>],
) -> Result<Vec<LtvStep>> {
    if states.len() != observations.len() {
        return Err(Error::Dimension(format!(
            "{} states for {} observations",
            states.len(),
            observations.len()
        )));
    }
    let m = system.transition.len();
    states
        .iter()
        .zip(observations)
        .map(|(x, y)| {
            if x.len() != m || y.len() != system.observation.len() {
                return Err(Error::Dimension(format!("state/observation sizes {}/{} do not match the lattice", x.len(), y.len())));
            }
            let mut a = DMatrix::zeros(m, m);
            let mut c = DMatrix::zeros(m, m);
            let mut u = DVector::zeros(m);
            let mut ybar = y.clone();
            for i in 0..m {
                let f = &system.transition[i];
                let fs = f.segments()[f.active_segment(x[i])];
                a[(i, i)] = fs.slope;
                u[i] = fs.intercept;
                let h = &system.observation[i];
                let hs = h.segments()[h.active_segment(x[i])];
                c[(i, i)] = hs.slope;
                ybar[i] -= hs.intercept;
            }
            Ok(LtvStep { transition: a, observation: c, offset: u, shifted_observation: ybar })
        })
        .collect()
}

/// The stacked system `z`, `H`, `W` for one trajectory.
#[derive(Debug, Clone)]
pub struct BatchSystem {
    pub z: DVector<f64>,
    pub h: DMatrix<f64>,
    /// Diagonal blocks of `W` in order `P̌_1, Q_2..Q_L, R_1..R_L`.
    pub w_blocks: Vec<DMatrix<f64>>,
    state_dim: usize,
    len: usize,
}

impl BatchSystem {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// The full block-diagonal `W`.
    pub fn w(&self) -> DMatrix<f64> {
        let size: usize = self.w_blocks.iter().map(|b| b.nrows()).sum();
        let mut w = DMatrix::zeros(size, size);
        let mut at = 0;
        for b in &self.w_blocks {
            let k = b.nrows();
            w.view_mut((at, at), (k, k)).copy_from(b);
            at += k;
        }
        w
    }

    fn w_inverse(&self) -> Result<DMatrix<f64>> {
        let size: usize = self.w_blocks.iter().map(|b| b.nrows()).sum();
        let mut w = DMatrix::zeros(size, size);
        let mut at = 0;
        for b in &self.w_blocks {
            let k = b.nrows();
            w.view_mut((at, at), (k, k)).copy_from(&spd_inverse(b)?);
            at += k;
        }
        Ok(w)
    }

    /// `HᵀW⁻¹H` and `HᵀW⁻¹z`.
    pub fn normal_equations(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let hw = self.h.transpose() * self.w_inverse()?;
        Ok((&hw * &self.h, hw * &self.z))
    }
}

fn check_block(b: &DMatrix<f64>, dim: usize, what: &str, index: usize) -> Result<()> {
    if b.shape() != (dim, dim) {
        return Err(Error::Dimension(format!("{what}_{index} is {:?}, expected {dim}x{dim}", b.shape())));
    }
    cholesky_lower(b).map_err(|_| Error::InvalidModel(format!("{what}_{index} is not positive definite")))?;
    Ok(())
}

/// Stacks `z`, `H`, `W`. `process_noise` holds `Q_2..Q_L` (length `L−1`),
/// `observation_noise` holds `R_1..R_L` (length `L`).
pub fn assemble(
    steps: &[LtvStep],
    prior: &GaussianBelief,
    process_noise: &[DMatrix<f64>],
    observation_noise: &[DMatrix<f64>],
) -> Result<BatchSystem> {
    let len = steps.len();
    if len == 0 {
        return Err(Error::Config("batch estimation needs at least one step".into()));
    }
    let m = prior.mean.len();
    let n = steps[0].shifted_observation.len();
    if process_noise.len() != len - 1 || observation_noise.len() != len {
        return Err(Error::Dimension(format!(
            "{len} steps need {} process and {len} observation covariances, got {} and {}",
            len - 1,
            process_noise.len(),
            observation_noise.len()
        )));
    }
    check_block(&prior.cov, m, "P", 1)?;
    for (k, q) in process_noise.iter().enumerate() {
        check_block(q, m, "Q", k + 2)?;
    }
    for (k, r) in observation_noise.iter().enumerate() {
        check_block(r, n, "R", k + 1)?;
    }
    for s in steps {
        if s.transition.shape() != (m, m) || s.observation.shape() != (n, m) || s.offset.len() != m || s.shifted_observation.len() != n {
            return Err(Error::Dimension("inconsistent linear time-varying step dimensions".into()));
        }
    }

    let top = len * m;
    let mut h = DMatrix::zeros(top + len * n, top);
    let mut z = DVector::zeros(top + len * n);
    z.rows_mut(0, m).copy_from(&prior.mean);
    for k in 0..len {
        h.view_mut((k * m, k * m), (m, m)).fill_with_identity();
        if k > 0 {
            h.view_mut((k * m, (k - 1) * m), (m, m)).copy_from(&(-&steps[k - 1].transition));
            z.rows_mut(k * m, m).copy_from(&steps[k - 1].offset);
        }
        h.view_mut((top + k * n, k * m), (n, m)).copy_from(&steps[k].observation);
        z.rows_mut(top + k * n, n).copy_from(&steps[k].shifted_observation);
    }
    let mut w_blocks = Vec::with_capacity(2 * len);
    w_blocks.push(prior.cov.clone());
    w_blocks.extend(process_noise.iter().cloned());
    w_blocks.extend(observation_noise.iter().cloned());
    Ok(BatchSystem { z, h, w_blocks, state_dim: m, len })
}

/// [`assemble`] with the same `Q` and `R` at every step.
pub fn assemble_constant(
    steps: &[LtvStep],
    prior: &GaussianBelief,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<BatchSystem> {
    let len = steps.len();
    assemble(steps, prior, &vec![q.clone(); len.saturating_sub(1)], &vec![r.clone(); len])
}

/// Solves the normal equations by Cholesky and unstacks `x̂_1..x̂_L`.
pub fn batch_estimate(system: &BatchSystem) -> Result<Vec<DVector<f64>>> {
    let (normal, rhs) = system.normal_equations()?;
    let l = cholesky_lower(&normal)?;
    let x = cholesky_solve(&l, &rhs);
    let m = system.state_dim;
    Ok((0..system.len).map(|k| x.rows(k * m, m).into_owned()).collect())
}

/// Batch estimate of one trajectory of `model` linearized through `lattice`.
/// The prior is `x̌_1 = f(x̂_0)` with covariance `p1`.
pub fn smooth_trajectory(
    model: &dyn StateSpaceModel,
    lattice: &LtpwlSystem,
    trajectory: &Trajectory,
    x0: &DVector<f64>,
    p1: &DMatrix<f64>,
) -> Result<Vec<DVector<f64>>> {
    let steps = ltv_steps(lattice, &trajectory.states, &trajectory.observations)?;
    let prior = GaussianBelief::new(model.transition(x0), p1.clone());
    batch_estimate(&assemble_constant(&steps, &prior, model.process_noise(), model.observation_noise())?)
}

/// One supervised pre-training pair: network inputs, the pieces of the update
/// they feed, and the true state.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSample {
    pub dx: Tensor,
    pub dy: Tensor,
    /// Pseudo prior `x̌_j = f(x̂_{j-1})`.
    pub prior: DVector<f64>,
    /// `Δy_j = y_j − h(x̌_j)`
    pub innovation: DVector<f64>,
    pub target: DVector<f64>,
}

/// Feature windows built from batch estimates `x̂_1..x̂_L` exactly as the
/// filter would build them, with `x̂_0 = x0` and `Δx_0 = 0`.
pub fn build_pretrain_instance(
    trajectory: &Trajectory,
    estimates: &[DVector<f64>],
    model: &dyn StateSpaceModel,
    x0: &DVector<f64>,
    config: &NetConfig,
) -> Result<Vec<PretrainSample>> {
    if estimates.len() != trajectory.len() {
        return Err(Error::Dimension(format!(
            "{} estimates for a trajectory of length {}",
            estimates.len(),
            trajectory.len()
        )));
    }
    let mut window = FeatureWindow::new(config.window, config.state_dim, config.obs_dim);
    let mut prev_post = x0.clone();
    let mut prev_prior = x0.clone();
    let mut out = Vec::with_capacity(trajectory.len());
    for (j, y) in trajectory.observations.iter().enumerate() {
        let prior = model.transition(&prev_post);
        let innovation = y - model.observe(&prior);
        window.push(&prev_post - &prev_prior, innovation.clone());
        out.push(PretrainSample {
            dx: window.dx_tensor(),
            dy: window.dy_tensor(),
            prior: prior.clone(),
            innovation,
            target: trajectory.states[j].clone(),
        });
        prev_prior = prior;
        prev_post = estimates[j].clone();
    }
    Ok(out)
}

/// Pre-training corpus: trajectories, their batch estimates and samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSet {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
    pub estimates: Vec<Vec<DVector<f64>>>,
    pub samples: Vec<Vec<PretrainSample>>,
}

/// Linearizes `model` at `points`, batch-estimates every trajectory and
/// builds its pre-training samples. Trajectories are processed in parallel.
pub fn build_pretrain_set(
    model: &dyn StateSpaceModel,
    lattice: &LtpwlSystem,
    meta: DatasetMeta,
    trajectories: &[Trajectory],
    x0: &DVector<f64>,
    p1: &DMatrix<f64>,
    config: &NetConfig,
) -> Result<PretrainSet> {
    let built = trajectories
        .par_iter()
        .map(|t| {
            let est = smooth_trajectory(model, lattice, t, x0, p1)?;
            let samples = build_pretrain_instance(t, &est, model, x0, config)?;
            Ok((est, samples))
        })
        .collect::<Result<Vec<_>>>()?;
    let (estimates, samples) = built.into_iter().unzip();
    Ok(PretrainSet { meta, trajectories: trajectories.to_vec(), estimates, samples })
}

#[derive(Serialize, Deserialize)]
struct FeatureFile {
    dx: Vec<Vec<f64>>,
    dy: Vec<Vec<f64>>,
    prior: Vec<f64>,
    innovation: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PretrainInstanceFile {
    #[serde(flatten)]
    trajectory: TrajectoryFile,
    xhat: Vec<Vec<f64>>,
    features: Vec<FeatureFile>,
}

#[derive(Serialize, Deserialize)]
struct PretrainFile {
    meta: DatasetMeta,
    window: usize,
    instances: Vec<PretrainInstanceFile>,
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(|r| r.to_vec()).collect()
}

fn tensor_from_rows(r: &[Vec<f64>]) -> std::result::Result<Tensor, String> {
    let cols = r.first().map_or(0, |x| x.len());
    Tensor::new(vec![r.len(), cols], r.concat()).map_err(|e| e.to_string())
}

impl PretrainSet {
    pub fn to_json(&self) -> String {
        let window = self.samples.first().and_then(|s| s.first()).map_or(0, |s| s.dx.rows());
        let file = PretrainFile {
            meta: self.meta.clone(),
            window,
            instances: self
                .trajectories
                .iter()
                .zip(&self.estimates)
                .zip(&self.samples)
                .map(|((t, e), s)| PretrainInstanceFile {
                    trajectory: t.into(),
                    xhat: rows(e),
                    features: s
                        .iter()
                        .map(|f| FeatureFile {
                            dx: tensor_rows(&f.dx),
                            dy: tensor_rows(&f.dy),
                            prior: f.prior.iter().copied().collect(),
                            innovation: f.innovation.iter().copied().collect(),
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("pre-training serialization cannot fail")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let file: PretrainFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut set = PretrainSet { meta: file.meta, trajectories: vec![], estimates: vec![], samples: vec![] };
        for inst in file.instances {
            let traj = Trajectory { states: from_rows(&inst.trajectory.x), observations: from_rows(&inst.trajectory.y) };
            if inst.features.len() != traj.len() || inst.xhat.len() != traj.len() {
                return Err("feature count does not match trajectory length".into());
            }
            let samples = inst
                .features
                .iter()
                .zip(&traj.states)
                .map(|(f, x)| {
                    Ok(PretrainSample {
                        dx: tensor_from_rows(&f.dx)?,
                        dy: tensor_from_rows(&f.dy)?,
                        prior: DVector::from_column_slice(&f.prior),
                        innovation: DVector::from_column_slice(&f.innovation),
                        target: x.clone(),
                    })
                })
                .collect::<std::result::Result<Vec<_>, String>>()?;
            set.estimates.push(from_rows(&inst.xhat));
            set.samples.push(samples);
            set.trajectories.push(traj);
        }
        if set.trajectories.len() != set.meta.n {
            return Err(format!("meta.n = {} but {} instances", set.meta.n, set.trajectories.len()));
        }
        Ok(set)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|message| Error::Format { path: path.into(), message })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltpwl::linearize_system;
    use crate::system::{generate_dataset, noise_free_trajectory, simulate_trajectory, LinearModel, SynthModel, SynthParams};

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn v1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn scalar_step(a: f64, c: f64, u: f64, ybar: f64) -> LtvStep {
        LtvStep { transition: m1(a), observation: m1(c), offset: v1(u), shifted_observation: v1(ybar) }
    }

    #[test]
    fn smallest_system_layout_and_solution() {
        let prior = GaussianBelief::new(v1(0.0), m1(1.0));
        let sys = assemble_constant(&[scalar_step(0.0, 1.0, 0.0, 2.0)], &prior, &m1(1.0), &m1(1.0)).unwrap();
        assert_eq!(sys.h, DMatrix::from_column_slice(2, 1, &[1.0, 1.0]));
        assert_eq!(sys.z, DVector::from_vec(vec![0.0, 2.0]));
        assert_eq!(sys.w(), DMatrix::identity(2, 2));
        assert!((batch_estimate(&sys).unwrap()[0][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_step_subdiagonal() {
        let prior = GaussianBelief::new(v1(0.0), m1(1.0));
        let steps = [scalar_step(0.7, 1.0, 0.3, 1.0), scalar_step(0.9, 2.0, 0.0, 1.0)];
        let sys = assemble_constant(&steps, &prior, &m1(1.0), &m1(1.0)).unwrap();
        assert_eq!(sys.h[(1, 0)], -0.7);
        assert_eq!(sys.h[(1, 1)], 1.0);
        assert_eq!(sys.h[(0, 1)], 0.0);
        assert_eq!(sys.h[(3, 1)], 2.0);
        assert_eq!(sys.z[1], 0.3);
    }

    #[test]
    fn benchmark_dimensions_and_block_tridiagonal_normal_matrix() {
        let model = SynthModel::isotropic(SynthParams::TRUE_SYSTEM, 2, 1.0, 1.0).unwrap();
        let x0 = DVector::from_vec(vec![0.1, 0.1]);
        let lattice = linearize_system(&model, &noise_free_trajectory(&model, &x0, 10)).unwrap();
        let traj = simulate_trajectory(&model, &x0, 10, 4).unwrap();
        let steps = ltv_steps(&lattice, &traj.states, &traj.observations).unwrap();
        let prior = GaussianBelief::new(model.transition(&x0), DMatrix::identity(2, 2));
        let sys = assemble_constant(&steps, &prior, model.process_noise(), model.observation_noise()).unwrap();
        assert_eq!(sys.h.shape(), (40, 20));
        assert_eq!(sys.z.len(), 40);
        let (normal, _) = sys.normal_equations().unwrap();
        for bi in 0..10usize {
            for bj in 0..10 {
                if bi.abs_diff(bj) > 1 {
                    assert!(normal.view((2 * bi, 2 * bj), (2, 2)).amax() <= 1e-14);
                }
            }
        }
    }

    #[test]
    fn anchors_reproduce_jacobians() {
        let model = SynthModel::isotropic(SynthParams::TRUE_SYSTEM, 2, 1.0, 1.0).unwrap();
        let x0 = DVector::from_vec(vec![0.1, 0.1]);
        let points = noise_free_trajectory(&model, &x0, 10);
        let lattice = linearize_system(&model, &points).unwrap();
        let obs: Vec<_> = points.iter().map(|x| model.observe(x)).collect();
        let steps = ltv_steps(&lattice, &points, &obs).unwrap();
        for (s, p) in steps.iter().zip(&points) {
            assert!((&s.transition - model.transition_jacobian(p)).amax() <= 1e-12);
            assert!((&s.observation - model.observation_jacobian(p)).amax() <= 1e-12);
        }
        let single = linearize_system(&model, &points[..1]).unwrap();
        let steps = ltv_steps(&single, &points, &obs).unwrap();
        for s in &steps {
            assert_eq!(s.transition, model.transition_jacobian(&points[0]));
        }
    }

    #[test]
    fn linear_model_has_no_offsets_and_noise_free_data_is_recovered() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.8, -0.5]));
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 0.7]));
        let model = LinearModel::new(a, c, DMatrix::identity(2, 2) * 0.0, DMatrix::identity(2, 2) * 0.0).unwrap();
        let x0 = DVector::from_vec(vec![1.0, -2.0]);
        let traj = simulate_trajectory(&model, &x0, 6, 0).unwrap();
        let lattice = linearize_system(&model, &traj.states).unwrap();
        let steps = ltv_steps(&lattice, &traj.states, &traj.observations).unwrap();
        for (s, y) in steps.iter().zip(&traj.observations) {
            assert!(s.offset.amax() < 1e-15);
            assert!((&s.shifted_observation - y).amax() < 1e-15);
        }
        let prior = GaussianBelief::new(model.transition(&x0), DMatrix::identity(2, 2));
        let sys = assemble_constant(&steps, &prior, &DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).unwrap();
        for (e, x) in batch_estimate(&sys).unwrap().iter().zip(&traj.states) {
            assert!((e - x).amax() < 1e-10);
        }
    }

    #[test]
    fn rejects_non_pd_blocks() {
        let prior = GaussianBelief::new(v1(0.0), m1(0.0));
        assert!(assemble_constant(&[scalar_step(1.0, 1.0, 0.0, 0.0)], &prior, &m1(1.0), &m1(1.0)).is_err());
        let prior = GaussianBelief::new(v1(0.0), m1(1.0));
        assert!(assemble_constant(&[scalar_step(1.0, 1.0, 0.0, 0.0)], &prior, &m1(1.0), &m1(-1.0)).is_err());
        assert!(assemble_constant(&[], &prior, &m1(1.0), &m1(1.0)).is_err());
    }

    #[test]
    fn pretrain_windows_and_counts() {
        let model = SynthModel::isotropic(SynthParams::TRUE_SYSTEM, 2, 1.0, 1.0).unwrap();
        let x0 = DVector::from_vec(vec![0.1, 0.1]);
        let traj = simulate_trajectory(&model, &x0, 10, 8).unwrap();
        let lattice = linearize_system(&model, &noise_free_trajectory(&model, &x0, 10)).unwrap();
        let est = smooth_trajectory(&model, &lattice, &traj, &x0, &DMatrix::identity(2, 2)).unwrap();
        let cfg = NetConfig::benchmark();
        let samples = build_pretrain_instance(&traj, &est, &model, &x0, &cfg).unwrap();
        assert_eq!(samples.len(), 10);
        assert!(samples[0].dx.data().iter().all(|&v| v == 0.0));
        assert!(samples[0].dy.data()[..6].iter().all(|&v| v == 0.0));
        assert_eq!(samples[0].prior, model.transition(&x0));
        assert_eq!(&samples[0].dy.data()[6..], samples[0].innovation.as_slice());
        // Δx_1 = x̂_1 − x̌_1 appears as the newest Δx entry at j = 2
        let dx1 = &est[0] - &samples[0].prior;
        assert_eq!(&samples[1].dx.data()[6..], dx1.as_slice());
        assert_eq!(samples[1].prior, model.transition(&est[0]));
    }

    #[test]
    fn exact_estimates_on_noise_free_data_give_zero_innovations() {
        let model = SynthModel::isotropic(SynthParams::TRUE_SYSTEM, 2, 0.0, 0.0).unwrap();
        let x0 = DVector::from_vec(vec![0.1, 0.1]);
        let traj = simulate_trajectory(&model, &x0, 10, 0).unwrap();
        let samples = build_pretrain_instance(&traj, &traj.states, &model, &x0, &NetConfig::benchmark()).unwrap();
        for s in samples {
            assert!(s.innovation.amax() < 1e-15);
            assert!((&s.prior - &s.target).amax() < 1e-15);
        }
    }

    #[test]
    fn pretrain_set_roundtrip() {
        let model = SynthModel::isotropic(SynthParams::TRUE_SYSTEM, 2, 1.0, 1.0).unwrap();
        let x0 = DVector::from_vec(vec![0.1, 0.1]);
        let data = generate_dataset(&model, &x0, 3, 10, 1).unwrap();
        let lattice = linearize_system(&model, &noise_free_trajectory(&model, &x0, 10)).unwrap();
        let set = build_pretrain_set(&model, &lattice, data.meta.clone(), &data.instances, &x0, &DMatrix::identity(2, 2), &NetConfig::benchmark()).unwrap();
        let text = set.to_json();
        assert!(text.contains("\"features\""));
        assert_eq!(PretrainSet::from_json(&text).unwrap(), set);
    }
}
