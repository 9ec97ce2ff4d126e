//! The attention Kalman filter: model-based prediction, network-predicted gain.
//!
//! At step `k`:
//!
//! ```text
//! x̌_k = f(x̂_{k-1}),   ŷ_k = h(x̌_k)
//! push (Δx_{k-1}, Δy_k) with Δx_{k-1} = x̂_{k-1} − x̌_{k-1}, Δy_k = y_k − ŷ_k
//! K_k = net(window)
//! x̂_k = x̌_k + K_k Δy_k
//! ```
//!
//! `Δx_0` is the zero vector. Before the window fills, missing slots are zeros
//! placed before the oldest real entry.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nn::{forward, AttentionNetParams, GradientTape, NetConfig, Tensor};
use crate::system::StateSpaceModel;

/// The last `s` state corrections and innovations, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    capacity: usize,
    state_dim: usize,
    obs_dim: usize,
    dx: VecDeque<DVector<f64>>,
    dy: VecDeque<DVector<f64>>,
}

impl FeatureWindow {
    pub fn new(capacity: usize, state_dim: usize, obs_dim: usize) -> Self {
        FeatureWindow {
            capacity,
            state_dim,
            obs_dim,
            dx: VecDeque::with_capacity(capacity),
            dy: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of real (non-padding) entries per feature type.
    pub fn len(&self) -> usize {
        self.dx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dx.is_empty()
    }

    /// Number of zero-padded slots per feature type.
    pub fn padding(&self) -> usize {
        self.capacity - self.dx.len()
    }

    pub fn push(&mut self, dx: DVector<f64>, dy: DVector<f64>) {
        debug_assert_eq!(dx.len(), self.state_dim);
        debug_assert_eq!(dy.len(), self.obs_dim);
        if self.dx.len() == self.capacity {
            self.dx.pop_front();
            self.dy.pop_front();
        }
        self.dx.push_back(dx);
        self.dy.push_back(dy);
    }

    fn padded(entries: &VecDeque<DVector<f64>>, capacity: usize, width: usize) -> Tensor {
        let mut t = Tensor::zeros(&[capacity, width]);
        let offset = (capacity - entries.len()) * width;
        for (i, v) in entries.iter().enumerate() {
            t.data_mut()[offset + i * width..offset + (i + 1) * width].copy_from_slice(v.as_slice());
        }
        t
    }

    /// The `Δx` window as an `s × m` matrix.
    pub fn dx_tensor(&self) -> Tensor {
        Self::padded(&self.dx, self.capacity, self.state_dim)
    }

    /// The `Δy` window as an `s × n` matrix.
    pub fn dy_tensor(&self) -> Tensor {
        Self::padded(&self.dy, self.capacity, self.obs_dim)
    }
}

/// Filter state between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AtkfState {
    pub x_hat: DVector<f64>,
    /// `x̌` of the step that produced `x_hat`; equals `x_hat` initially so `Δx_0 = 0`.
    pub prior: DVector<f64>,
    pub window: FeatureWindow,
    pub step: usize,
}

impl AtkfState {
    pub fn new(x0: DVector<f64>, config: &NetConfig) -> Self {
        AtkfState {
            prior: x0.clone(),
            x_hat: x0,
            window: FeatureWindow::new(config.window, config.state_dim, config.obs_dim),
            step: 0,
        }
    }
}

/// Everything one step computed.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub prior: DVector<f64>,
    pub predicted_obs: DVector<f64>,
    pub innovation: DVector<f64>,
    pub gain: DMatrix<f64>,
    pub estimate: DVector<f64>,
    pub tape: GradientTape,
}

fn gain_matrix(k: &Tensor, m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(m, n, k.data())
}

/// One prediction/update step. Advances `state` in place.
pub fn atkf_step(
    model: &dyn StateSpaceModel,
    params: &AttentionNetParams,
    state: &mut AtkfState,
    y: &DVector<f64>,
) -> Result<StepOutput> {
    let cfg = params.config;
    if model.state_dim() != cfg.state_dim || model.obs_dim() != cfg.obs_dim {
        return Err(Error::Dimension(format!(
            "network expects m={} n={}, model has m={} n={}",
            cfg.state_dim,
            cfg.obs_dim,
            model.state_dim(),
            model.obs_dim()
        )));
    }
    if y.len() != cfg.obs_dim || state.x_hat.len() != cfg.state_dim {
        return Err(Error::Dimension(format!(
            "observation has {} entries and estimate {}, expected {} and {}",
            y.len(),
            state.x_hat.len(),
            cfg.obs_dim,
            cfg.state_dim
        )));
    }
    let step = state.step + 1;
    let prior = model.transition(&state.x_hat);
    let predicted_obs = model.observe(&prior);
    let innovation = y - &predicted_obs;
    state.window.push(&state.x_hat - &state.prior, innovation.clone());

    let (k, tape) = forward(params, &state.window.dx_tensor(), &state.window.dy_tensor())?;
    if !k.is_finite() {
        return Err(Error::NonFinite { context: "network gain".into(), step });
    }
    let gain = gain_matrix(&k, cfg.state_dim, cfg.obs_dim);
    let estimate = &prior + &gain * &innovation;
    if !estimate.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "state estimate".into(), step });
    }
    state.x_hat = estimate.clone();
    state.prior = prior.clone();
    state.step = step;
    Ok(StepOutput { prior, predicted_obs, innovation, gain, estimate, tape })
}

/// Runs the filter over a whole observation sequence, keeping every step's record.
pub fn atkf_run_recorded(
    model: &dyn StateSpaceModel,
    params: &AttentionNetParams,
    observations: &[DVector<f64>],
    x0: &DVector<f64>,
) -> Result<Vec<StepOutput>> {
    if observations.is_empty() {
        return Err(Error::Config("observation sequence is empty".into()));
    }
    let mut state = AtkfState::new(x0.clone(), &params.config);
    observations.iter().map(|y| atkf_step(model, params, &mut state, y)).collect()
}

/// Runs the filter and returns the posterior estimates `x̂_1..x̂_L`.
pub fn atkf_run(
    model: &dyn StateSpaceModel,
    params: &AttentionNetParams,
    observations: &[DVector<f64>],
    x0: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    Ok(atkf_run_recorded(model, params, observations, x0)?.into_iter().map(|s| s.estimate).collect())
}

/// Parameters whose network always outputs the fixed gain `k` (`m × n`).
pub fn constant_gain_params(config: NetConfig, k: &DMatrix<f64>) -> Result<AttentionNetParams> {
    if k.shape() != (config.state_dim, config.obs_dim) {
        return Err(Error::Dimension(format!("gain is {:?}, network expects {:?}", k.shape(), (config.state_dim, config.obs_dim))));
    }
    let mut params = AttentionNetParams::init(config, 0)?;
    params.out_w.scale(0.0);
    let row_major: Vec<f64> = k.transpose().iter().copied().collect();
    params.out_b.data_mut().copy_from_slice(&row_major);
    Ok(params)
}
