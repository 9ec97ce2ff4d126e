//! The simplified self-attention network that predicts the Kalman gain.
//!
//! The forward pass, for windows `Δx` (`s × m`) and `Δy` (`s × n`):
//!
//! ```text
//! Δx, Δy ← each row scaled to unit length       (optional, on by default)
//! X0 = [Δx·Wx + bx ; Δy·Wy + by] + PE          (2s × d)
//! A  = softmax_rows(X0·X0ᵀ / √d)
//! Z  = A·X0                                    simplified attention: no projections
//! Y  = Z + relu(Z·W1 + b1)·W2 + b2             MLP with a residual connection
//! K  = reshape(flatten(Y)·Wout + bout, m × n)
//! ```
//!
//! The graph is fixed, so [`backward`] is its hand-derived adjoint rather than
//! a general autodiff engine. It also returns the gradients with respect to
//! the two input windows, which training needs to backpropagate through the
//! filter recursion.

mod tensor;

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

pub use tensor::Tensor;

/// Shapes of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub state_dim: usize,
    pub obs_dim: usize,
    /// Sliding-window length `s`; the attention sequence has `2s` tokens.
    pub window: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Scale every window row to unit Euclidean length before embedding.
    /// This bounds the gain regardless of the feature magnitudes, which keeps
    /// the filter recursion from feeding large corrections back into itself.
    #[serde(default = "default_normalize")]
    pub normalize_inputs: bool,
}

fn default_normalize() -> bool {
    true
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::benchmark()
    }
}

impl NetConfig {
    /// 2-D benchmark shapes: window 4, width 32, hidden 64.
    pub fn benchmark() -> Self {
        NetConfig { state_dim: 2, obs_dim: 2, window: 4, d_model: 32, d_ff: 64, normalize_inputs: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.obs_dim == 0 || self.window == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config(format!("network dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!("d_model must be even for positional encoding, got {}", self.d_model)));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        2 * self.window
    }
}

const NAMES: [&str; 10] = [
    "embed_x_w", "embed_x_b", "embed_y_w", "embed_y_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "out_w", "out_b",
];

/// All learnable weights. The attention layer itself has none.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionNetParams {
    pub config: NetConfig,
    pub embed_x_w: Tensor,
    pub embed_x_b: Tensor,
    pub embed_y_w: Tensor,
    pub embed_y_b: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl AttentionNetParams {
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let NetConfig { state_dim: m, obs_dim: n, d_model: d, d_ff: f, .. } = config;
        Ok(AttentionNetParams {
            config,
            embed_x_w: Tensor::zeros(&[m, d]),
            embed_x_b: Tensor::zeros(&[d]),
            embed_y_w: Tensor::zeros(&[n, d]),
            embed_y_b: Tensor::zeros(&[d]),
            mlp_w1: Tensor::zeros(&[d, f]),
            mlp_b1: Tensor::zeros(&[f]),
            mlp_w2: Tensor::zeros(&[f, d]),
            mlp_b2: Tensor::zeros(&[d]),
            out_w: Tensor::zeros(&[config.seq_len() * d, m * n]),
            out_b: Tensor::zeros(&[m * n]),
        })
    }

    /// Glorot-uniform weights in `±√(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = seeded(seed);
        for t in params.tensors_mut() {
            if t.shape().len() == 2 {
                let limit = (6.0 / (t.rows() + t.cols()) as f64).sqrt();
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-limit..limit));
            }
        }
        Ok(params)
    }

    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.embed_x_w, &self.embed_x_b, &self.embed_y_w, &self.embed_y_b, &self.mlp_w1,
            &self.mlp_b1, &self.mlp_w2, &self.mlp_b2, &self.out_w, &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.embed_x_w, &mut self.embed_x_b, &mut self.embed_y_w, &mut self.embed_y_b,
            &mut self.mlp_w1, &mut self.mlp_b1, &mut self.mlp_w2, &mut self.mlp_b2, &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn names() -> [&'static str; 10] {
        NAMES
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &AttentionNetParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.scale(factor);
        }
    }

    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            config: self.config,
            tensors: NAMES
                .iter()
                .zip(self.tensors())
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.format_version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {}", file.format_version));
        }
        let mut params = Self::zeros(file.config).map_err(|e| e.to_string())?;
        if file.tensors.len() != NAMES.len() {
            return Err(format!("expected {} tensors, found {}", NAMES.len(), file.tensors.len()));
        }
        for ((slot, name), stored) in params.tensors_mut().into_iter().zip(NAMES).zip(file.tensors) {
            if stored.name != name || stored.shape != slot.shape() {
                return Err(format!(
                    "tensor {} {:?} does not match expected {name} {:?}",
                    stored.name,
                    stored.shape,
                    slot.shape()
                ));
            }
            *slot = Tensor::new(stored.shape, stored.data).map_err(|e| e.to_string())?;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|message| Error::Format { path: path.into(), message })
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: NetConfig,
    tensors: Vec<NamedTensor>,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    let cols = m.cols();
    let mut out = m.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Sinusoidal encoding: `(t, 2i) = sin(t / 10000^{2i/d})`, `(t, 2i+1) = cos(…)`.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding width must be even, got {d}")));
    }
    Ok(Tensor::from_fn(len, d, |t, c| {
        let i = (c / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Rows shorter than this are treated like padding: mapped to zero, with zero gradient.
pub const NORM_FLOOR: f64 = 1e-12;

/// Scales each row to unit length; returns the scaled rows and the original norms.
pub fn normalize_rows(t: &Tensor) -> (Tensor, Vec<f64>) {
    let cols = t.cols();
    let mut out = t.clone();
    let mut norms = Vec::with_capacity(t.rows());
    for row in out.data_mut().chunks_mut(cols) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > NORM_FLOOR {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            row.fill(0.0);
        }
        norms.push(norm);
    }
    (out, norms)
}

fn normalize_rows_backward(unit: &Tensor, norms: &[f64], grad: &Tensor) -> Tensor {
    let cols = unit.cols();
    let mut out = grad.clone();
    for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
        if norms[r] <= NORM_FLOOR {
            row.fill(0.0);
            continue;
        }
        let u = unit.row(r);
        let along: f64 = u.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
        for (g, &u) in row.iter_mut().zip(u) {
            *g = (*g - u * along) / norms[r];
        }
    }
    out
}

fn attention_with_weights(x: &Tensor) -> (Tensor, Tensor) {
    let mut scores = x.matmul_t(x);
    scores.scale(1.0 / (x.cols() as f64).sqrt());
    let weights = softmax_rows(&scores);
    (weights.matmul(x), weights)
}

/// `softmax_rows(X·Xᵀ / √d) · X`.
pub fn simplified_attention(x: &Tensor) -> Tensor {
    attention_with_weights(x).0
}

fn embed(window: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut e = window.matmul(w);
    e.add_row_bias(b);
    e
}

/// Embeds both windows and stacks them, `Δx` block first. No positional encoding.
pub fn embed_windows(params: &AttentionNetParams, dx: &Tensor, dy: &Tensor) -> Tensor {
    Tensor::vstack(
        &embed(dx, &params.embed_x_w, &params.embed_x_b),
        &embed(dy, &params.embed_y_w, &params.embed_y_b),
    )
}

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct GradientTape {
    /// Windows as embedded (after normalization, when enabled).
    dx: Tensor,
    dy: Tensor,
    /// Row norms of the raw windows; empty when normalization is off.
    dx_norms: Vec<f64>,
    dy_norms: Vec<f64>,
    tokens: Tensor,
    weights: Tensor,
    attended: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
    features: Tensor,
}

impl GradientTape {
    /// The attention input `X0` (embedded windows plus positional encoding).
    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    /// The attention distribution (`2s × 2s`).
    pub fn attention_weights(&self) -> &Tensor {
        &self.weights
    }
}

/// Gradients of a scalar loss with respect to every parameter and both windows.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: AttentionNetParams,
    pub dx_window: Tensor,
    pub dy_window: Tensor,
}

fn check_window(t: &Tensor, rows: usize, cols: usize, what: &str) -> Result<()> {
    if t.shape() != [rows, cols] {
        return Err(Error::Dimension(format!("{what} window is {:?}, expected [{rows}, {cols}]", t.shape())));
    }
    Ok(())
}

/// Predicts the gain `K` (`m × n`) from the two feature windows.
pub fn forward(params: &AttentionNetParams, dx: &Tensor, dy: &Tensor) -> Result<(Tensor, GradientTape)> {
    let cfg = params.config;
    check_window(dx, cfg.window, cfg.state_dim, "Δx")?;
    check_window(dy, cfg.window, cfg.obs_dim, "Δy")?;

    let (dx, dy, dx_norms, dy_norms) = if cfg.normalize_inputs {
        let (dx, nx) = normalize_rows(dx);
        let (dy, ny) = normalize_rows(dy);
        (dx, dy, nx, ny)
    } else {
        (dx.clone(), dy.clone(), Vec::new(), Vec::new())
    };
    let mut tokens = embed_windows(params, &dx, &dy);
    tokens.add_assign(&positional_encoding(cfg.seq_len(), cfg.d_model)?);
    let (attended, weights) = attention_with_weights(&tokens);

    let mut hidden_pre = attended.matmul(&params.mlp_w1);
    hidden_pre.add_row_bias(&params.mlp_b1);
    let mut hidden = hidden_pre.clone();
    hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let mut features = hidden.matmul(&params.mlp_w2);
    features.add_row_bias(&params.mlp_b2);
    features.add_assign(&attended);

    let flat = Tensor::new(vec![1, features.len()], features.data().to_vec())?;
    let mut gain = flat.matmul(&params.out_w);
    gain.add_row_bias(&params.out_b);
    let gain = gain.reshape(&[cfg.state_dim, cfg.obs_dim])?;

    let tape = GradientTape {
        dx,
        dy,
        dx_norms,
        dy_norms,
        tokens,
        weights,
        attended,
        hidden_pre,
        hidden,
        features,
    };
    Ok((gain, tape))
}

/// Exact adjoint of [`forward`] for the loss gradient `d_gain = ∂L/∂K`.
///
/// Takes the tape by value: each tape serves exactly one backward pass.
pub fn backward(params: &AttentionNetParams, tape: GradientTape, d_gain: &Tensor) -> Result<Gradients> {
    let cfg = params.config;
    let (m, n, s) = (cfg.state_dim, cfg.obs_dim, cfg.window);
    if d_gain.len() != m * n {
        return Err(Error::Dimension(format!("gain gradient has {} entries, expected {}", d_gain.len(), m * n)));
    }
    let mut grads = AttentionNetParams::zeros(cfg)?;
    let g = Tensor::new(vec![1, m * n], d_gain.data().to_vec())?;

    // output head
    let flat = Tensor::new(vec![1, tape.features.len()], tape.features.data().to_vec())?;
    grads.out_w = flat.t_matmul(&g);
    grads.out_b = Tensor::new(vec![m * n], g.data().to_vec())?;
    let d_features = g.matmul_t(&params.out_w).reshape(&[cfg.seq_len(), cfg.d_model])?;

    // MLP with residual
    grads.mlp_w2 = tape.hidden.t_matmul(&d_features);
    grads.mlp_b2 = d_features.sum_rows();
    let mut d_pre = d_features.matmul_t(&params.mlp_w2);
    for (d, &pre) in d_pre.data_mut().iter_mut().zip(tape.hidden_pre.data()) {
        if pre <= 0.0 {
            *d = 0.0;
        }
    }
    grads.mlp_w1 = tape.attended.t_matmul(&d_pre);
    grads.mlp_b1 = d_pre.sum_rows();
    let mut d_attended = d_pre.matmul_t(&params.mlp_w1);
    d_attended.add_assign(&d_features);

    // Z = A·X0, A = softmax(X0·X0ᵀ/√d)
    let a = &tape.weights;
    let d_weights = d_attended.matmul_t(&tape.tokens);
    let mut d_tokens = a.t_matmul(&d_attended);
    let t = a.rows();
    let mut d_scores = Tensor::zeros(&[t, t]);
    for i in 0..t {
        let dot: f64 = a.row(i).iter().zip(d_weights.row(i)).map(|(p, q)| p * q).sum();
        for j in 0..t {
            d_scores.data_mut()[i * t + j] = a.at(i, j) * (d_weights.at(i, j) - dot);
        }
    }
    let sym = Tensor::from_fn(t, t, |i, j| d_scores.at(i, j) + d_scores.at(j, i));
    let mut from_scores = sym.matmul(&tape.tokens);
    from_scores.scale(1.0 / (cfg.d_model as f64).sqrt());
    d_tokens.add_assign(&from_scores);

    // embeddings (the positional encoding is constant)
    let d_ex = d_tokens.slice_rows(0, s);
    let d_ey = d_tokens.slice_rows(s, s);
    grads.embed_x_w = tape.dx.t_matmul(&d_ex);
    grads.embed_x_b = d_ex.sum_rows();
    grads.embed_y_w = tape.dy.t_matmul(&d_ey);
    grads.embed_y_b = d_ey.sum_rows();
    let mut dx_window = d_ex.matmul_t(&params.embed_x_w);
    let mut dy_window = d_ey.matmul_t(&params.embed_y_w);
    if cfg.normalize_inputs {
        dx_window = normalize_rows_backward(&tape.dx, &tape.dx_norms, &dx_window);
        dy_window = normalize_rows_backward(&tape.dy, &tape.dy_norms, &dy_window);
    }
    Ok(Gradients { params: grads, dx_window, dy_window })
}
