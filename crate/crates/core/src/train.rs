//! Two-phase training of the gain network and its evaluation.
//!
//! Pre-training fits the network on windows built from batch estimates, with
//! no filter recursion involved. End-to-end training then runs the filter over
//! whole trajectories and backpropagates through every step of the recursion.

use std::fmt::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atkf::{atkf_run, atkf_run_recorded};
use crate::batch::{PretrainSample, PretrainSet};
use crate::error::{Error, Result};
use crate::filters::mse;
use crate::nn::{backward, forward, AttentionNetParams, Tensor};
use crate::rng::{derive_seed, seeded};
use crate::system::{StateSpaceModel, Trajectory};

/// Optimizer and schedule settings shared by both phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Trajectories per optimizer step.
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 50,
            pretrain_epochs: 50,
            train_epochs: 20,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::Config("moment decay rates must lie in [0, 1) and epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// `(1/L) Σ_j ‖x_j − x̂_j‖²`: squared norms summed over dimensions, averaged over steps.
pub fn loss(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    if estimates.len() != truth.len() || truth.is_empty() {
        return Err(Error::Dimension(format!(
            "loss needs equal, non-empty sequences; got {} estimates and {} states",
            estimates.len(),
            truth.len()
        )));
    }
    Ok(estimates.iter().zip(truth).map(|(e, x)| (x - e).norm_squared()).sum::<f64>() / truth.len() as f64)
}

/// Adaptive moment estimation.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    steps: i32,
    first: AttentionNetParams,
    second: AttentionNetParams,
}

impl Adam {
    pub fn new(params: &AttentionNetParams, cfg: &TrainConfig) -> Result<Self> {
        Ok(Adam {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            steps: 0,
            first: AttentionNetParams::zeros(params.config)?,
            second: AttentionNetParams::zeros(params.config)?,
        })
    }

    pub fn step(&mut self, params: &mut AttentionNetParams, grads: &AttentionNetParams) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
        let moments = self.first.tensors_mut().into_iter().zip(self.second.tensors_mut());
        for ((p, g), (m, v)) in tensors.zip(moments) {
            let rows = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in rows {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    E2e,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::E2e => "e2e",
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_mse: Option<f64>,
    pub wall_seconds: f64,
}

/// Result of a training phase.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation MSE (or the last
    /// epoch when no validator is given).
    pub params: AttentionNetParams,
    /// 0 when the starting parameters were never beaten.
    pub best_epoch: usize,
    /// Validation score of the starting parameters.
    pub initial_val: Option<f64>,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// Validation score of the kept parameters, if a validator was used.
    pub fn best_val(&self) -> Option<f64> {
        if self.best_epoch == 0 {
            self.initial_val
        } else {
            self.log.iter().find(|r| r.epoch == self.best_epoch).and_then(|r| r.val_mse)
        }
    }
}

/// Scores parameters on held-out data; lower is better.
pub type Validator<'a> = dyn FnMut(&AttentionNetParams) -> Result<f64> + 'a;

/// The training log as CSV, one row per epoch.
pub fn log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::new();
    writeln!(out, "phase,epoch,mean_loss,val_mse,wall_seconds").unwrap();
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in log {
        writeln!(out, "{},{},{},{},{:.3}", r.phase.as_str(), r.epoch, r.mean_loss, opt(r.val_mse), r.wall_seconds).unwrap();
    }
    out
}

fn gain_gradient(d_gain: &DMatrix<f64>) -> Tensor {
    let row_major: Vec<f64> = d_gain.transpose().iter().copied().collect();
    Tensor::new(vec![d_gain.nrows(), d_gain.ncols()], row_major).expect("shape matches data")
}

/// Loss and parameter gradient for the samples of one pre-training trajectory.
pub fn pretrain_gradients(params: &AttentionNetParams, samples: &[PretrainSample]) -> Result<(f64, AttentionNetParams)> {
    let len = samples.len() as f64;
    let mut grads = AttentionNetParams::zeros(params.config)?;
    let mut total = 0.0;
    for (j, s) in samples.iter().enumerate() {
        let (k, tape) = forward(params, &s.dx, &s.dy)?;
        let gain = DMatrix::from_row_slice(params.config.state_dim, params.config.obs_dim, k.data());
        let err = &s.target - (&s.prior + &gain * &s.innovation);
        total += err.norm_squared();
        let d_estimate = err * (-2.0 / len);
        let g = backward(params, tape, &gain_gradient(&(&d_estimate * s.innovation.transpose())))?;
        if !g.params.is_finite() {
            return Err(Error::NonFinite { context: "pre-training gradient".into(), step: j + 1 });
        }
        grads.accumulate(&g.params);
    }
    Ok((total / len, grads))
}

/// Loss, parameter gradient and the per-step gain gradients `∂loss/∂K_k`
/// of one filter run, by backpropagation through the whole recursion.
pub struct TrajectoryGradients {
    pub loss: f64,
    pub params: AttentionNetParams,
    pub gains: Vec<DMatrix<f64>>,
}

pub fn trajectory_gradients(
    model: &dyn StateSpaceModel,
    params: &AttentionNetParams,
    trajectory: &Trajectory,
    x0: &DVector<f64>,
) -> Result<TrajectoryGradients> {
    let cfg = params.config;
    let (m, n, s) = (cfg.state_dim, cfg.obs_dim, cfg.window);
    let len = trajectory.len();
    let records = atkf_run_recorded(model, params, &trajectory.observations, x0)?;
    let estimates: Vec<_> = records.iter().map(|r| r.estimate.clone()).collect();
    let value = loss(&estimates, &trajectory.states)?;

    // g_post[k] = ∂loss/∂x̂_k, g_dx[k] = ∂loss/∂Δx_k, g_dy[k] = ∂loss/∂Δy_k (1-based k)
    let mut g_post: Vec<DVector<f64>> = std::iter::once(DVector::zeros(m))
        .chain(trajectory.states.iter().zip(&estimates).map(|(x, e)| (x - e) * (-2.0 / len as f64)))
        .collect();
    let mut g_dx = vec![DVector::zeros(m); len + 1];
    let mut g_dy = vec![DVector::zeros(n); len + 1];
    let mut grads = AttentionNetParams::zeros(cfg)?;
    let mut gains = vec![DMatrix::zeros(m, n); len];

    for (idx, rec) in records.into_iter().enumerate().rev() {
        let k = idx + 1;
        let g = &g_post[k] + &g_dx[k];
        let d_gain = &g * rec.innovation.transpose();
        let nn = backward(params, rec.tape, &gain_gradient(&d_gain))?;
        grads.accumulate(&nn.params);
        for t in 0..s {
            // slot t holds Δx_{k-s+t} and Δy_{k-s+1+t}; Δx_0 and padding are constants
            if let Some(j) = (k + t).checked_sub(s).filter(|&j| j >= 1) {
                g_dx[j] += DVector::from_row_slice(nn.dx_window.row(t));
            }
            if let Some(j) = (k + t + 1).checked_sub(s).filter(|&j| j >= 1) {
                g_dy[j] += DVector::from_row_slice(nn.dy_window.row(t));
            }
        }
        g_dy[k] += rec.gain.transpose() * &g;
        let g_prior = &g - model.observation_jacobian(&rec.prior).transpose() * &g_dy[k] - &g_dx[k];
        if !g_prior.iter().all(|v| v.is_finite()) || !nn.params.is_finite() {
            return Err(Error::NonFinite { context: "end-to-end gradient".into(), step: k });
        }
        if k > 1 {
            let jf = model.transition_jacobian(&estimates[k - 2]);
            g_post[k - 1] += jf.transpose() * g_prior;
        }
        gains[idx] = d_gain;
    }
    Ok(TrajectoryGradients { loss: value, params: grads, gains })
}

/// Mean (dimension-averaged) MSE of the filter over `trajectories`.
pub fn evaluate(
    params: &AttentionNetParams,
    trajectories: &[Trajectory],
    model: &dyn StateSpaceModel,
    x0: &DVector<f64>,
) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let per: Vec<f64> = trajectories
        .par_iter()
        .map(|t| mse(&atkf_run(model, params, &t.observations, x0)?, &t.states))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

struct Selection {
    best: AttentionNetParams,
    best_val: f64,
    best_epoch: usize,
}

impl Selection {
    fn offer(&mut self, params: &AttentionNetParams, val: Option<f64>, epoch: usize) {
        match val {
            Some(v) if v < self.best_val => {
                self.best = params.clone();
                self.best_val = v;
                self.best_epoch = epoch;
            }
            Some(_) => {}
            None => {
                self.best = params.clone();
                self.best_epoch = epoch;
            }
        }
    }
}

/// Loss and parameter gradient of one training item.
type ItemGradients<'a> = dyn Fn(&AttentionNetParams, usize) -> Result<(f64, AttentionNetParams)> + Sync + 'a;

/// Shared epoch loop: shuffles `count` items per epoch, averages per-item
/// gradients over each mini-batch in index order, steps the optimizer.
fn run_phase(
    phase: Phase,
    params: &AttentionNetParams,
    cfg: &TrainConfig,
    epochs: usize,
    count: usize,
    item_gradients: &ItemGradients<'_>,
    mut validate: Option<&mut Validator<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Config(format!("{} set is empty", phase.as_str())));
    }
    let started = Instant::now();
    let mut params = params.clone();
    let mut adam = Adam::new(&params, cfg)?;
    let mut val = |p: &AttentionNetParams| -> Result<Option<f64>> {
        match validate.as_mut() {
            Some(f) => f(p).map(Some),
            None => Ok(None),
        }
    };
    let start_val = val(&params)?;
    let mut log = Vec::with_capacity(epochs);
    let mut selection = Selection { best: params.clone(), best_val: start_val.unwrap_or(f64::INFINITY), best_epoch: 0 };
    let phase_key = match phase {
        Phase::Pretrain => 0,
        Phase::E2e => 1,
    };
    let mut order: Vec<usize> = (0..count).collect();
    for epoch in 1..=epochs {
        let mut rng = seeded(derive_seed(derive_seed(cfg.seed, phase_key), epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, AttentionNetParams)> =
                batch.par_iter().map(|&i| item_gradients(&params, i)).collect::<Result<_>>()?;
            let mut grads = AttentionNetParams::zeros(params.config)?;
            for (l, g) in &results {
                total += l;
                grads.accumulate(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::NonFinite { context: format!("{} gradient in epoch {epoch}", phase.as_str()), step: 0 });
            }
            adam.step(&mut params, &grads);
        }
        let mean_loss = total / count as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite { context: format!("{} loss in epoch {epoch}", phase.as_str()), step: 0 });
        }
        let val_mse = val(&params)?;
        log::info!("{} epoch {epoch}: loss {mean_loss:.6} val {val_mse:?}", phase.as_str());
        log.push(EpochRecord { phase, epoch, mean_loss, val_mse, wall_seconds: started.elapsed().as_secs_f64() });
        selection.offer(&params, val_mse, epoch);
    }
    if epochs == 0 {
        selection.best = params;
    }
    Ok(TrainOutcome { params: selection.best, best_epoch: selection.best_epoch, initial_val: start_val, log })
}

/// Supervised pre-training on batch-estimate windows. Works only on the
/// stored samples; no filter is run here.
pub fn pretrain(
    params: &AttentionNetParams,
    data: &PretrainSet,
    cfg: &TrainConfig,
    validate: Option<&mut Validator<'_>>,
) -> Result<TrainOutcome> {
    let grad = |p: &AttentionNetParams, i: usize| pretrain_gradients(p, &data.samples[i]);
    run_phase(Phase::Pretrain, params, cfg, cfg.pretrain_epochs, data.samples.len(), &grad, validate)
}

/// End-to-end training through the filter recursion.
pub fn train_e2e(
    params: &AttentionNetParams,
    model: &dyn StateSpaceModel,
    trajectories: &[Trajectory],
    x0: &DVector<f64>,
    cfg: &TrainConfig,
    validate: Option<&mut Validator<'_>>,
) -> Result<TrainOutcome> {
    if let Some(t) = trajectories.first() {
        if trajectories.iter().any(|u| u.len() != t.len()) {
            return Err(Error::Config("training trajectories must share one length".into()));
        }
    }
    let grad = |p: &AttentionNetParams, i: usize| {
        trajectory_gradients(model, p, &trajectories[i], x0).map(|g| (g.loss, g.params))
    };
    run_phase(Phase::E2e, params, cfg, cfg.train_epochs, trajectories.len(), &grad, validate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atkf::constant_gain_params;
    use crate::batch::build_pretrain_set;
    use crate::ltpwl::linearize_system;
    use crate::nn::NetConfig;
    use crate::system::{generate_dataset, noise_free_trajectory, simulate_trajectory, SynthModel, SynthParams};
    use nalgebra::DMatrix;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn x0() -> DVector<f64> {
        v(&[0.1, 0.1])
    }

    fn model() -> SynthModel {
        SynthModel::isotropic(SynthParams::TRUE_SYSTEM, 2, 1.0, 1.0).unwrap()
    }

    #[test]
    fn loss_examples() {
        let z = v(&[0.0, 0.0]);
        let zero = std::slice::from_ref(&z);
        assert_eq!(loss(zero, zero).unwrap(), 0.0);
        assert_eq!(loss(&[v(&[1.0, 1.0])], zero).unwrap(), 2.0);
        assert_eq!(loss(&[v(&[1.0, 0.0]), v(&[0.0, 1.0])], &[z.clone(), z.clone()]).unwrap(), 1.0);
        assert!(loss(zero, &[]).is_err());
    }

    #[test]
    fn zero_gradient_step_is_identity() {
        let p = AttentionNetParams::init(NetConfig::benchmark(), 1).unwrap();
        let mut q = p.clone();
        let mut adam = Adam::new(&p, &TrainConfig::default()).unwrap();
        adam.step(&mut q, &AttentionNetParams::zeros(p.config).unwrap());
        assert_eq!(p, q);
    }

    #[test]
    fn single_step_gain_gradient_matches_closed_form() {
        let model = model();
        let params = AttentionNetParams::init(NetConfig::benchmark(), 2).unwrap();
        for seed in 0..5 {
            let traj = simulate_trajectory(&model, &x0(), 1, seed).unwrap();
            let g = trajectory_gradients(&model, &params, &traj, &x0()).unwrap();
            let rec = &atkf_run_recorded(&model, &params, &traj.observations, &x0()).unwrap()[0];
            let dxt = &traj.states[0] - &rec.prior;
            let closed = (&rec.gain * &rec.innovation - dxt) * rec.innovation.transpose() * 2.0;
            assert!((&g.gains[0] - closed).amax() <= 1e-10);
        }
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let model = model();
        let cfg = NetConfig { window: 3, d_model: 4, d_ff: 6, ..NetConfig::benchmark() };
        let params = AttentionNetParams::init(cfg, 7).unwrap();
        let traj = simulate_trajectory(&model, &x0(), 7, 3).unwrap();
        let g = trajectory_gradients(&model, &params, &traj, &x0()).unwrap();
        let value = |p: &AttentionNetParams| loss(&atkf_run(&model, p, &traj.observations, &x0()).unwrap(), &traj.states).unwrap();
        let h = 1e-6;
        for ti in 0..10 {
            for i in 0..params.tensors()[ti].len() {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].data_mut()[i] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].data_mut()[i] -= h;
                let fd = (value(&plus) - value(&minus)) / (2.0 * h);
                let an = g.params.tensors()[ti].data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
                assert!(rel < 1e-5, "tensor {ti}[{i}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn zero_epochs_and_zero_rate_leave_params_unchanged() {
        let model = model();
        let data = generate_dataset(&model, &x0(), 6, 10, 1).unwrap();
        let cfg_net = NetConfig::benchmark();
        let lattice = linearize_system(&model, &noise_free_trajectory(&model, &x0(), 10)).unwrap();
        let set = build_pretrain_set(&model, &lattice, data.meta.clone(), &data.instances, &x0(), &DMatrix::identity(2, 2), &cfg_net).unwrap();
        let p = AttentionNetParams::init(cfg_net, 3).unwrap();
        let none = TrainConfig { pretrain_epochs: 0, train_epochs: 0, ..TrainConfig::default() };
        assert_eq!(pretrain(&p, &set, &none, None).unwrap().params, p);
        assert_eq!(train_e2e(&p, &model, &data.instances, &x0(), &none, None).unwrap().params, p);
        let frozen = TrainConfig { learning_rate: 0.0, pretrain_epochs: 2, train_epochs: 2, batch_size: 4, ..TrainConfig::default() };
        assert_eq!(pretrain(&p, &set, &frozen, None).unwrap().params, p);
        assert_eq!(train_e2e(&p, &model, &data.instances, &x0(), &frozen, None).unwrap().params, p);
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let model = model();
        let data = generate_dataset(&model, &x0(), 8, 10, 2).unwrap();
        let p = AttentionNetParams::init(NetConfig::benchmark(), 4).unwrap();
        let cfg = TrainConfig { train_epochs: 3, batch_size: 3, learning_rate: 1e-3, ..TrainConfig::default() };
        let a = train_e2e(&p, &model, &data.instances, &x0(), &cfg, None).unwrap();
        let b = train_e2e(&p, &model, &data.instances, &x0(), &cfg, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, p);
        assert_eq!(a.log.len(), 3);
        assert_eq!(a.best_epoch, 3);
    }

    #[test]
    fn best_validation_checkpoint_is_kept() {
        let model = model();
        let data = generate_dataset(&model, &x0(), 8, 10, 2).unwrap();
        let p = AttentionNetParams::init(NetConfig::benchmark(), 4).unwrap();
        let cfg = TrainConfig { train_epochs: 3, batch_size: 4, learning_rate: 1e-3, ..TrainConfig::default() };
        // a validator that prefers the untouched starting point
        let start = p.clone();
        let mut prefer_start = |q: &AttentionNetParams| Ok(if *q == start { 0.0 } else { 1.0 });
        let out = train_e2e(&p, &model, &data.instances, &x0(), &cfg, Some(&mut prefer_start)).unwrap();
        assert_eq!(out.best_epoch, 0);
        assert_eq!(out.params, p);
        assert_eq!(out.initial_val, Some(0.0));
        assert_eq!(out.log[0].val_mse, Some(1.0));
    }

    #[test]
    fn evaluate_zero_gain_noise_free_is_zero() {
        let model = SynthModel::isotropic(SynthParams::TRUE_SYSTEM, 2, 0.0, 0.0).unwrap();
        let data = generate_dataset(&model, &x0(), 3, 20, 0).unwrap();
        let p = constant_gain_params(NetConfig::benchmark(), &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(evaluate(&p, &data.instances, &model, &x0()).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let model = model();
        let data = generate_dataset(&model, &x0(), 4, 5, 2).unwrap();
        let mut p = AttentionNetParams::init(NetConfig::benchmark(), 4).unwrap();
        p.out_w.data_mut()[0] = f64::INFINITY;
        let cfg = TrainConfig { train_epochs: 1, ..TrainConfig::default() };
        assert!(matches!(
            train_e2e(&p, &model, &data.instances, &x0(), &cfg, None),
            Err(Error::NonFinite { .. })
        ));
    }
}
