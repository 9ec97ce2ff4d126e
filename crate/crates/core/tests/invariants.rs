mod common;

use atkf_core::batch::{assemble, batch_estimate};
use atkf_core::filters::{ekf_run, mse, pf_run, ukf_run, GaussianBelief, UkfConfig};
use atkf_core::nn::{forward, softmax_rows, AttentionNetParams, NetConfig, Tensor};
use atkf_core::rng::{derive_seed, seeded};
use atkf_core::system::{simulate_trajectory, LinearModel, StateSpaceModel, SynthModel, SynthParams};
use common::{kalman_filter, max_abs_diff, random_ltv, random_matrix, random_spd, random_vector, rts_smoother};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng as _;

fn benchmark(params: SynthParams) -> SynthModel {
    SynthModel::isotropic(params, 2, 1.0, 1.0).unwrap()
}

fn central_difference(g: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let h = 1e-6;
    let cols: Vec<_> = (0..x.len())
        .map(|j| {
            let mut plus = x.clone();
            plus[j] += h;
            let mut minus = x.clone();
            minus[j] -= h;
            (g(&plus) - g(&minus)) / (2.0 * h)
        })
        .collect();
    DMatrix::from_columns(&cols)
}

#[test]
fn jacobians_match_finite_differences_at_random_points() {
    let mut rng = seeded(1);
    for params in [SynthParams::TRUE_SYSTEM, SynthParams::MISMATCHED] {
        let model = benchmark(params);
        for _ in 0..100 {
            let x = random_vector(&mut rng, 2, 5.0);
            for (fd, an) in [
                (central_difference(|v| model.transition(v), &x), model.transition_jacobian(&x)),
                (central_difference(|v| model.observe(v), &x), model.observation_jacobian(&x)),
            ] {
                for (a, b) in fd.iter().zip(an.iter()) {
                    let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
                    assert!(rel <= 1e-6, "x = {x}: fd {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn more_particles_do_not_hurt() {
    let model = benchmark(SynthParams::TRUE_SYSTEM);
    let x0 = DVector::from_column_slice(&[0.1, 0.1]);
    let init = GaussianBelief::exact(x0.clone());
    let mut wins = 0;
    for seed in 0..50 {
        let t = simulate_trajectory(&model, &x0, 100, derive_seed(99, seed)).unwrap();
        let few = mse(&pf_run(&model, &t.observations, &init, 10, seed).unwrap(), &t.states).unwrap();
        let many = mse(&pf_run(&model, &t.observations, &init, 1000, seed).unwrap(), &t.states).unwrap();
        if many <= few {
            wins += 1;
        }
    }
    assert!(wins >= 45, "{wins}/50");
}

#[test]
fn filters_are_pure() {
    let model = benchmark(SynthParams::MISMATCHED);
    let x0 = DVector::from_column_slice(&[0.1, 0.1]);
    let init = GaussianBelief::exact(x0.clone());
    let t = simulate_trajectory(&model, &x0, 30, 4).unwrap();
    assert_eq!(ekf_run(&model, &t.observations, &init).unwrap(), ekf_run(&model, &t.observations, &init).unwrap());
    let ukf = |_| ukf_run(&model, &t.observations, &init, &UkfConfig::default()).unwrap();
    assert_eq!(ukf(0), ukf(1));
    assert_eq!(pf_run(&model, &t.observations, &init, 64, 3).unwrap(), pf_run(&model, &t.observations, &init, 64, 3).unwrap());
    assert_ne!(pf_run(&model, &t.observations, &init, 64, 3).unwrap(), pf_run(&model, &t.observations, &init, 64, 4).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batch_estimate_equals_smoother(seed in any::<u64>(), m in 1usize..4, n in 1usize..4, len in 1usize..21) {
        let problem = random_ltv(&mut seeded(seed), m, n, len);
        let system = assemble(&problem.steps, &problem.prior, &problem.q, &problem.r).unwrap();
        prop_assert_eq!(system.z.len(), system.h.nrows());
        let err = max_abs_diff(&batch_estimate(&system).unwrap(), &rts_smoother(&problem));
        prop_assert!(err <= 1e-8, "{}", err);
    }

    #[test]
    fn gaussian_filters_are_exact_on_linear_systems(seed in any::<u64>(), m in 1usize..4, n in 1usize..4) {
        let mut rng = seeded(seed);
        let model = LinearModel::new(
            random_matrix(&mut rng, m, m, 0.6),
            random_matrix(&mut rng, n, m, 1.0),
            random_spd(&mut rng, m, 0.1),
            random_spd(&mut rng, n, 0.1),
        )
        .unwrap();
        let init = GaussianBelief::new(random_vector(&mut rng, m, 1.0), random_spd(&mut rng, m, 0.1));
        let t = simulate_trajectory(&model, &init.mean, 25, rng.random()).unwrap();
        let (kf, _) = kalman_filter(&model.a, &model.c, model.process_noise(), model.observation_noise(), &t.observations, &init);
        prop_assert!(max_abs_diff(&ekf_run(&model, &t.observations, &init).unwrap(), &kf) <= 1e-8);
        let ukf = ukf_run(&model, &t.observations, &init, &UkfConfig::default()).unwrap();
        prop_assert!(max_abs_diff(&ukf, &kf) <= 1e-8);
    }

    #[test]
    fn simulation_is_a_function_of_its_inputs(seed in any::<u64>(), len in 1usize..30) {
        let model = SynthModel::isotropic(SynthParams::TRUE_SYSTEM, 2, 4.0, 4.0).unwrap();
        let x0 = DVector::from_column_slice(&[0.1, 0.1]);
        let a = simulate_trajectory(&model, &x0, len, seed).unwrap();
        prop_assert_eq!(&a, &simulate_trajectory(&model, &x0, len, seed).unwrap());
        prop_assert_eq!(a.states.len(), a.observations.len());
    }

    #[test]
    fn true_transition_is_bounded(x in -1e6f64..1e6, y in -1e6f64..1e6) {
        let fx = benchmark(SynthParams::TRUE_SYSTEM).transition(&DVector::from_column_slice(&[x, y]));
        prop_assert!(fx.amax() <= 0.91 + 1e-15);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, values in prop::collection::vec(-50.0f64..50.0, 36)) {
        let t = Tensor::new(vec![rows, rows], values[..rows * rows].to_vec()).unwrap();
        let s = softmax_rows(&t);
        for r in 0..rows {
            prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_is_pure(seed in any::<u64>()) {
        let cfg = NetConfig { d_model: 8, d_ff: 8, ..NetConfig::benchmark() };
        let p = AttentionNetParams::init(cfg, seed).unwrap();
        let mut rng = seeded(seed);
        let dx = Tensor::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let dy = Tensor::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let (a, tape) = forward(&p, &dx, &dy).unwrap();
        for r in 0..8 {
            prop_assert!((tape.attention_weights().row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert_eq!(a, forward(&p, &dx, &dy).unwrap().0);
    }
}
