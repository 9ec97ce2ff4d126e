//! Attention Kalman filter: a nonlinear filter whose gain is predicted by a
//! small self-attention network, together with everything needed to train
//! and benchmark it.
//!
//! - [`system`]: state-space models, the benchmark system, simulation.
//! - [`filters`]: EKF, UKF and particle filter baselines.
//! - [`ltpwl`]: lattice piecewise-linear approximation from tangents.
//! - [`batch`]: batch (smoothing) estimation and pre-training samples.
//! - [`nn`]: the attention network with its backward pass.
//! - [`atkf`]: the filter loop.
//! - [`train`]: pre-training and end-to-end training.
//! - [`experiment`]: the data/train/eval pipeline behind the `atkf` binary.
//!
//! The guide in `book/` walks through each piece with runnable examples.

pub mod atkf;
pub mod batch;
pub mod error;
pub mod experiment;
pub mod filters;
pub mod linalg;
pub mod ltpwl;
pub mod nn;
pub mod rng;
pub mod system;
pub mod train;

pub use error::{Error, Result};

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/lattice.md")]
    mod lattice {}
    #[doc = include_str!("../../../book/src/batch.md")]
    mod batch {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/filter.md")]
    mod filter {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
