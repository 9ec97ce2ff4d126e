use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_observations, GaussianBelief};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, cholesky_solve, symmetrize, JITTER};
use crate::system::StateSpaceModel;

/// Scaled sigma-point parameters.
///
/// The filter augments the state with the process noise, so sigma points are
/// drawn in `2m` dimensions and the propagated points already carry `Q`; the
/// update reuses them instead of redrawing. Observation noise stays additive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UkfConfig {
    /// Spread of the sigma points around the mean (`α`).
    pub spread: f64,
    /// Prior knowledge of the distribution (`β`, 2 is optimal for Gaussians).
    pub prior_knowledge: f64,
    /// Secondary scaling (`κ`).
    pub secondary_scaling: f64,
}

impl Default for UkfConfig {
    fn default() -> Self {
        UkfConfig { spread: 0.1, prior_knowledge: 2.0, secondary_scaling: 0.0 }
    }
}

struct Weights {
    mean: Vec<f64>,
    cov: Vec<f64>,
    scale: f64,
}

impl UkfConfig {
    fn weights(&self, dim: usize) -> Result<Weights> {
        let n = dim as f64;
        let lambda = self.spread * self.spread * (n + self.secondary_scaling) - n;
        let scale = n + lambda;
        if scale.is_nan() || scale <= 0.0 {
            return Err(Error::Config(format!("sigma-point scale n + λ = {scale} must be positive")));
        }
        let w = 1.0 / (2.0 * scale);
        let mut mean = vec![w; 2 * dim + 1];
        let mut cov = mean.clone();
        mean[0] = lambda / scale;
        cov[0] = mean[0] + 1.0 - self.spread * self.spread + self.prior_knowledge;
        Ok(Weights { mean, cov, scale })
    }
}

/// A matrix `S` with `S Sᵀ ≈ P`: Cholesky, then Cholesky with jitter, then
/// (for an indefinite but finite `P`) the square root of its PSD projection.
fn spread_factor(p: &DMatrix<f64>, step: usize) -> Result<DMatrix<f64>> {
    if let Ok(l) = cholesky_lower(p) {
        return Ok(l);
    }
    let n = p.nrows();
    if let Ok(l) = cholesky_lower(&(p + DMatrix::<f64>::identity(n, n) * JITTER)) {
        log::debug!("UKF step {step}: covariance needed jitter");
        return Ok(l);
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular { step, what: "UKF covariance square root".into() });
    }
    log::debug!("UKF step {step}: projecting indefinite covariance onto the PSD cone");
    let eig = symmetrize(p).symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Runs the unscented Kalman filter; returns one posterior mean per observation.
pub fn ukf_run(
    model: &dyn StateSpaceModel,
    observations: &[DVector<f64>],
    init: &GaussianBelief,
    config: &UkfConfig,
) -> Result<Vec<DVector<f64>>> {
    check_observations(observations, model.obs_dim())?;
    let m = model.state_dim();
    let aug = 2 * m;
    let weights = config.weights(aug)?;
    let q = model.process_noise();
    let r = model.observation_noise();
    let mut x = init.mean.clone();
    let mut p = init.cov.clone();
    let mut out = Vec::with_capacity(observations.len());

    for (k, y) in observations.iter().enumerate() {
        let step = k + 1;
        let mut pa = DMatrix::<f64>::zeros(aug, aug);
        pa.view_mut((0, 0), (m, m)).copy_from(&p);
        pa.view_mut((m, m), (m, m)).copy_from(q);
        let s = spread_factor(&pa, step)? * weights.scale.sqrt();

        // Propagated sigma points: f(state part) + noise part.
        let mut props = Vec::with_capacity(2 * aug + 1);
        props.push(model.transition(&x));
        for sign in [1.0, -1.0] {
            for j in 0..aug {
                let col = s.column(j) * sign;
                let xs = &x + col.rows(0, m);
                props.push(model.transition(&xs) + col.rows(m, m));
            }
        }
        let x_pred = props
            .iter()
            .zip(&weights.mean)
            .fold(DVector::zeros(m), |acc, (p, w)| acc + p * *w);
        let gammas: Vec<DVector<f64>> = props.iter().map(|p| model.observe(p)).collect();
        let y_pred = gammas
            .iter()
            .zip(&weights.mean)
            .fold(DVector::zeros(model.obs_dim()), |acc, (g, w)| acc + g * *w);

        let mut p_pred = DMatrix::<f64>::zeros(m, m);
        let mut pyy = r.clone();
        let mut pxy = DMatrix::<f64>::zeros(m, model.obs_dim());
        for ((xp, g), w) in props.iter().zip(&gammas).zip(&weights.cov) {
            let dx = xp - &x_pred;
            let dy = g - &y_pred;
            p_pred += &dx * dx.transpose() * *w;
            pyy += &dy * dy.transpose() * *w;
            pxy += &dx * dy.transpose() * *w;
        }
        let pyy = symmetrize(&pyy);

        let gain = match cholesky_lower(&pyy) {
            Ok(l) => {
                let mut kt = DMatrix::<f64>::zeros(pyy.nrows(), m);
                for i in 0..m {
                    kt.set_column(i, &cholesky_solve(&l, &pxy.row(i).transpose()));
                }
                kt.transpose()
            }
            Err(_) if pxy.amax() == 0.0 => DMatrix::zeros(m, pyy.nrows()),
            Err(_) => return Err(Error::Singular { step, what: "UKF innovation covariance".into() }),
        };
        x = &x_pred + &gain * (y - &y_pred);
        p = symmetrize(&(p_pred - &gain * &pyy * gain.transpose()));
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "UKF".into(), step });
        }
        out.push(x.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{simulate_trajectory, SynthModel, SynthParams};

    #[test]
    fn weights_sum_to_one() {
        for cfg in [UkfConfig::default(), UkfConfig { spread: 1.0, prior_knowledge: 2.0, secondary_scaling: 0.0 }] {
            for dim in 1..6 {
                let w = cfg.weights(dim).unwrap();
                assert!((w.mean.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_degenerate_scaling() {
        let cfg = UkfConfig { spread: 0.0, prior_knowledge: 2.0, secondary_scaling: 0.0 };
        assert!(cfg.weights(2).is_err());
    }

    #[test]
    fn noise_free_tracking() {
        let model = SynthModel::isotropic(SynthParams::TRUE_SYSTEM, 2, 0.0, 0.0).unwrap();
        let x0 = DVector::from_column_slice(&[0.1, 0.1]);
        let t = simulate_trajectory(&model, &x0, 20, 3).unwrap();
        let est = ukf_run(&model, &t.observations, &GaussianBelief::exact(x0), &UkfConfig::default()).unwrap();
        for (e, x) in est.iter().zip(&t.states) {
            assert!((e - x).amax() < 1e-6, "{e} vs {x}");
        }
    }
}
