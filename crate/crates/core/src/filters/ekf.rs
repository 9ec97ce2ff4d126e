use nalgebra::{DMatrix, DVector};

use super::{check_observations, GaussianBelief};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, cholesky_solve, symmetrize};
use crate::system::StateSpaceModel;

/// Runs the extended Kalman filter and returns one posterior mean per
/// observation. `init` is the belief about `x_0`; each step predicts then
/// updates.
pub fn ekf_run(
    model: &dyn StateSpaceModel,
    observations: &[DVector<f64>],
    init: &GaussianBelief,
) -> Result<Vec<DVector<f64>>> {
    check_observations(observations, model.obs_dim())?;
    let m = model.state_dim();
    let q = model.process_noise();
    let r = model.observation_noise();
    let mut x = init.mean.clone();
    let mut p = init.cov.clone();
    let mut out = Vec::with_capacity(observations.len());

    for (k, y) in observations.iter().enumerate() {
        let step = k + 1;
        let f_jac = model.transition_jacobian(&x);
        x = model.transition(&x);
        p = symmetrize(&(&f_jac * &p * f_jac.transpose() + q));

        let h_jac = model.observation_jacobian(&x);
        let pht = &p * h_jac.transpose();
        let s = symmetrize(&(&h_jac * &pht + r));
        let gain = match cholesky_lower(&s) {
            Ok(l) => {
                // K = P Hᵀ S⁻¹, solved row by row against the symmetric S.
                let mut kt = DMatrix::<f64>::zeros(s.nrows(), m);
                for i in 0..m {
                    let row = pht.row(i).transpose();
                    kt.set_column(i, &cholesky_solve(&l, &row));
                }
                kt.transpose()
            }
            // With no prior uncertainty the gain vanishes regardless of S.
            Err(_) if pht.amax() == 0.0 => DMatrix::zeros(m, s.nrows()),
            Err(_) => {
                return Err(Error::Singular { step, what: "EKF innovation covariance".into() })
            }
        };
        let innovation = y - model.observe(&x);
        x += &gain * innovation;
        // Joseph form keeps P symmetric PSD.
        let ikh = DMatrix::<f64>::identity(m, m) - &gain * &h_jac;
        p = symmetrize(&(&ikh * &p * ikh.transpose() + &gain * r * gain.transpose()));
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "EKF".into(), step });
        }
        out.push(x.clone());
    }
    Ok(out)
}
