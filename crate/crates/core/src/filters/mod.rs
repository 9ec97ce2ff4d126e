//! Classical baselines: extended and unscented Kalman filters, a bootstrap
//! particle filter, and the squared-error metric shared by every estimator.

mod ekf;
mod pf;
mod ukf;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use ekf::ekf_run;
pub use pf::{pf_run, ParticleFilter, ParticleSet, PfReport};
pub use ukf::{ukf_run, UkfConfig};

/// Mean and covariance of a Gaussian state belief.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        GaussianBelief { mean, cov }
    }

    /// A belief concentrated on a known state.
    pub fn exact(mean: DVector<f64>) -> Self {
        let m = mean.len();
        GaussianBelief { mean, cov: DMatrix::zeros(m, m) }
    }
}

/// Squared error averaged over time steps and state dimensions.
pub fn mse(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} estimates for {} true states",
            estimates.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (e, t) in estimates.iter().zip(truth) {
        if e.len() != t.len() {
            return Err(Error::Dimension(format!("estimate of size {} vs state of size {}", e.len(), t.len())));
        }
        total += (e - t).norm_squared();
        count += t.len();
    }
    Ok(total / count as f64)
}

fn check_observations(observations: &[DVector<f64>], obs_dim: usize) -> Result<()> {
    if observations.is_empty() {
        return Err(Error::Config("at least one observation is required".into()));
    }
    if let Some(k) = observations.iter().position(|y| y.len() != obs_dim) {
        return Err(Error::Dimension(format!("observation {} has wrong dimension", k + 1)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn mse_conventions() {
        let t = vec![v(&[0.3, -1.0]), v(&[2.0, 0.5])];
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        assert_eq!(mse(&[v(&[1.0, 1.0])], &[v(&[0.0, 0.0])]).unwrap(), 1.0);
        let z = vec![v(&[0.0, 0.0]), v(&[0.0, 0.0])];
        assert_eq!(mse(&[v(&[2.0, 0.0]), v(&[0.0, 0.0])], &z).unwrap(), 1.0);
        assert!(mse(&t[..1], &t).is_err());
    }
}
