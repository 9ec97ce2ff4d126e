//! Reference implementations used as oracles: a textbook Kalman filter and a
//! Rauch-Tung-Striebel smoother, both written directly from the recursions
//! and using nalgebra's LU inverse rather than anything from the crate.

#![allow(dead_code)]

use atkf_core::batch::LtvStep;
use atkf_core::filters::GaussianBelief;
use atkf_core::rng::Rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

pub fn inv(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().try_inverse().expect("oracle matrix is invertible")
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn random_vector(rng: &mut Rng, dim: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.random_range(-scale..scale))
}

/// `B·Bᵀ + floor·I`: symmetric positive definite.
pub fn random_spd(rng: &mut Rng, dim: usize, floor: f64) -> DMatrix<f64> {
    let b = random_matrix(rng, dim, dim, 1.0);
    &b * b.transpose() + DMatrix::identity(dim, dim) * floor
}

/// A random linear time-varying estimation problem.
pub struct LtvProblem {
    pub steps: Vec<LtvStep>,
    pub prior: GaussianBelief,
    /// `Q_2..Q_L`
    pub q: Vec<DMatrix<f64>>,
    /// `R_1..R_L`
    pub r: Vec<DMatrix<f64>>,
}

pub fn random_ltv(rng: &mut Rng, m: usize, n: usize, len: usize) -> LtvProblem {
    let steps = (0..len)
        .map(|_| LtvStep {
            transition: random_matrix(rng, m, m, 1.2),
            observation: random_matrix(rng, n, m, 1.5),
            offset: random_vector(rng, m, 1.0),
            shifted_observation: random_vector(rng, n, 3.0),
        })
        .collect();
    LtvProblem {
        steps,
        prior: GaussianBelief::new(random_vector(rng, m, 1.0), random_spd(rng, m, 0.2)),
        q: (1..len).map(|_| random_spd(rng, m, 0.1)).collect(),
        r: (0..len).map(|_| random_spd(rng, n, 0.1)).collect(),
    }
}

fn kf_update(
    x: &DVector<f64>,
    p: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let s = c * p * c.transpose() + r;
    let k = p * c.transpose() * inv(&s);
    let x = x + &k * (y - c * x);
    let i = DMatrix::identity(p.nrows(), p.nrows());
    let p = (&i - &k * c) * p;
    (x, (&p + p.transpose()) * 0.5)
}

/// Forward Kalman filter followed by the RTS backward pass.
pub fn rts_smoother(problem: &LtvProblem) -> Vec<DVector<f64>> {
    let len = problem.steps.len();
    let mut pred_x = Vec::with_capacity(len);
    let mut pred_p = Vec::with_capacity(len);
    let mut filt_x: Vec<DVector<f64>> = Vec::with_capacity(len);
    let mut filt_p: Vec<DMatrix<f64>> = Vec::with_capacity(len);
    for k in 0..len {
        let (x, p) = if k == 0 {
            (problem.prior.mean.clone(), problem.prior.cov.clone())
        } else {
            let a = &problem.steps[k - 1].transition;
            (a * &filt_x[k - 1] + &problem.steps[k - 1].offset, a * &filt_p[k - 1] * a.transpose() + &problem.q[k - 1])
        };
        let step = &problem.steps[k];
        let (xf, pf) = kf_update(&x, &p, &step.observation, &problem.r[k], &step.shifted_observation);
        pred_x.push(x);
        pred_p.push(p);
        filt_x.push(xf);
        filt_p.push(pf);
    }
    let mut smooth = filt_x.clone();
    for k in (0..len.saturating_sub(1)).rev() {
        let a = &problem.steps[k].transition;
        let g = &filt_p[k] * a.transpose() * inv(&pred_p[k + 1]);
        smooth[k] = &filt_x[k] + g * (&smooth[k + 1] - &pred_x[k + 1]);
    }
    smooth
}

/// Exact Kalman filter for `x_k = A x_{k-1} + w`, `y_k = C x_k + v`,
/// started from `init` at time 0. Returns posterior means and covariances.
pub fn kalman_filter(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    observations: &[DVector<f64>],
    init: &GaussianBelief,
) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let mut x = init.mean.clone();
    let mut p = init.cov.clone();
    let mut means = Vec::new();
    let mut covs = Vec::new();
    for y in observations {
        let xp = a * &x;
        let pp = a * &p * a.transpose() + q;
        (x, p) = kf_update(&xp, &pp, c, r, y);
        means.push(x.clone());
        covs.push(p.clone());
    }
    (means, covs)
}

pub fn max_abs_diff(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}
