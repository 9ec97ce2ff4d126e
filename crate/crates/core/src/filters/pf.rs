use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{check_observations, GaussianBelief};
use crate::error::{Error, Result};
use crate::linalg::{noise_factor, sqrt_with_jitter};
use crate::rng::{seeded, Rng};
use crate::system::StateSpaceModel;

/// Weighted particle approximation of the state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl ParticleSet {
    pub fn mean(&self) -> DVector<f64> {
        let m = self.particles[0].len();
        self.particles
            .iter()
            .zip(&self.weights)
            .fold(DVector::zeros(m), |acc, (p, w)| acc + p * *w)
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Systematic resampling with a single uniform offset.
    fn resample(&mut self, rng: &mut Rng) {
        let count = self.particles.len();
        let offset: f64 = rng.random::<f64>();
        let mut picked = Vec::with_capacity(count);
        let mut cumulative = self.weights[0];
        let mut i = 0;
        for j in 0..count {
            let u = (offset + j as f64) / count as f64;
            while u > cumulative && i + 1 < count {
                i += 1;
                cumulative += self.weights[i];
            }
            picked.push(self.particles[i].clone());
        }
        self.particles = picked;
        self.weights = vec![1.0 / count as f64; count];
    }
}

/// Per-step diagnostics of a particle-filter run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PfReport {
    pub means: Vec<DVector<f64>>,
    /// Effective sample size after weighting, before any resampling.
    pub ess: Vec<f64>,
    pub resampled: Vec<bool>,
    /// Steps (1-based) where every weight underflowed and were reset to uniform.
    pub degenerate_steps: Vec<usize>,
}

/// Bootstrap particle filter: propagate through `f` plus process noise,
/// weight by the Gaussian observation likelihood, resample systematically when
/// the effective sample size drops below half the particle count.
pub struct ParticleFilter<'a> {
    model: &'a dyn StateSpaceModel,
    set: ParticleSet,
    rng: Rng,
    process_factor: DMatrix<f64>,
    obs_factor: DMatrix<f64>,
    step: usize,
}

impl<'a> ParticleFilter<'a> {
    pub fn new(
        model: &'a dyn StateSpaceModel,
        init: &GaussianBelief,
        particle_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if particle_count == 0 {
            return Err(Error::Config("particle count must be at least 1".into()));
        }
        let mut rng = seeded(seed);
        let init_factor = noise_factor(&init.cov)?;
        let particles = (0..particle_count)
            .map(|_| &init.mean + sample(&mut rng, &init_factor))
            .collect();
        Ok(ParticleFilter {
            model,
            set: ParticleSet { particles, weights: vec![1.0 / particle_count as f64; particle_count] },
            rng,
            process_factor: noise_factor(model.process_noise())?,
            obs_factor: sqrt_with_jitter(model.observation_noise(), 0)?,
            step: 0,
        })
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.set
    }

    /// Advances one step; returns `(mean, ess, resampled, degenerate)`.
    pub fn step(&mut self, y: &DVector<f64>) -> Result<(DVector<f64>, f64, bool, bool)> {
        self.step += 1;
        let count = self.set.particles.len();
        let mut log_w = Vec::with_capacity(count);
        for (p, w) in self.set.particles.iter_mut().zip(&self.set.weights) {
            *p = self.model.transition(p) + sample(&mut self.rng, &self.process_factor);
            let residual = y - self.model.observe(p);
            let whitened = self
                .obs_factor
                .solve_lower_triangular(&residual)
                .expect("observation factor has a positive diagonal");
            log_w.push(w.ln() - 0.5 * whitened.norm_squared());
        }
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut degenerate = false;
        if max.is_finite() {
            let weights: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            self.set.weights = weights.into_iter().map(|w| w / total).collect();
        } else {
            degenerate = true;
            log::warn!("particle filter step {}: all weights vanished, resetting to uniform", self.step);
            self.set.weights = vec![1.0 / count as f64; count];
        }
        let mean = self.set.mean();
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "particle filter".into(), step: self.step });
        }
        let ess = self.set.effective_sample_size();
        let resample = ess < count as f64 / 2.0;
        if resample {
            self.set.resample(&mut self.rng);
        }
        Ok((mean, ess, resample, degenerate))
    }

    pub fn run(mut self, observations: &[DVector<f64>]) -> Result<PfReport> {
        check_observations(observations, self.model.obs_dim())?;
        let mut report = PfReport::default();
        for y in observations {
            let (mean, ess, resampled, degenerate) = self.step(y)?;
            if degenerate {
                report.degenerate_steps.push(self.step);
            }
            report.means.push(mean);
            report.ess.push(ess);
            report.resampled.push(resampled);
        }
        Ok(report)
    }
}

fn sample(rng: &mut Rng, factor: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(factor.ncols(), |_, _| StandardNormal.sample(rng));
    factor * z
}

/// Runs the bootstrap particle filter and returns the weighted mean per step.
pub fn pf_run(
    model: &dyn StateSpaceModel,
    observations: &[DVector<f64>],
    init: &GaussianBelief,
    particle_count: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    Ok(ParticleFilter::new(model, init, particle_count, seed)?.run(observations)?.means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{simulate_trajectory, SynthModel, SynthParams};

    #[test]
    fn noise_free_tracking() {
        let model = SynthModel::isotropic(SynthParams::TRUE_SYSTEM, 2, 0.0, 0.0).unwrap();
        let x0 = DVector::from_column_slice(&[0.1, 0.1]);
        let t = simulate_trajectory(&model, &x0, 15, 3).unwrap();
        let est = pf_run(&model, &t.observations, &GaussianBelief::exact(x0), 50, 1).unwrap();
        for (e, x) in est.iter().zip(&t.states) {
            assert!((e - x).amax() < 1e-12);
        }
    }

    #[test]
    fn systematic_resampling_keeps_heavy_particles() {
        let mut set = ParticleSet {
            particles: (0..4).map(|i| DVector::from_element(1, i as f64)).collect(),
            weights: vec![0.0, 0.0, 1.0, 0.0],
        };
        set.resample(&mut seeded(0));
        assert!(set.particles.iter().all(|p| p[0] == 2.0));
        assert!((set.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn underflow_resets_to_uniform() {
        let model = SynthModel::isotropic(SynthParams::TRUE_SYSTEM, 2, 1e-6, 1e-300).unwrap();
        let x0 = DVector::from_column_slice(&[0.1, 0.1]);
        let pf = ParticleFilter::new(&model, &GaussianBelief::exact(x0), 10, 0).unwrap();
        let report = pf.run(&[DVector::from_column_slice(&[1e200, 1e200])]).unwrap();
        assert_eq!(report.degenerate_steps, vec![1]);
    }

    #[test]
    fn weights_stay_normalized_and_run_is_seeded() {
        let model = SynthModel::isotropic(SynthParams::TRUE_SYSTEM, 2, 1.0, 1.0).unwrap();
        let x0 = DVector::from_column_slice(&[0.1, 0.1]);
        let t = simulate_trajectory(&model, &x0, 30, 9).unwrap();
        let init = GaussianBelief::exact(x0);
        let mut pf = ParticleFilter::new(&model, &init, 64, 4).unwrap();
        for y in &t.observations {
            pf.step(y).unwrap();
            assert!((pf.particles().weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(
            pf_run(&model, &t.observations, &init, 64, 4).unwrap(),
            pf_run(&model, &t.observations, &init, 64, 4).unwrap()
        );
        assert!(pf_run(&model, &t.observations, &init, 0, 4).is_err());
    }
}
