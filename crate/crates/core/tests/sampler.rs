use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semcom::channel::{NoiseKnowledge, Observation};
use semcom::denoiser::{Condition, GaussianMixturePrior};
use semcom::linop::DegradationOperator;
use semcom::sampler::{self, LambdaMode, RestorationConfig};
use semcom::schedule::NoiseSchedule;
use semcom::Error;

fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap()
}

fn observation(operator: DegradationOperator, y: Vec<f64>) -> Observation {
    Observation {
        y,
        operator,
        sigma_y_true: None,
        cond_sigma_true: None,
        condition_received: Vec::new(),
        knowledge: NoiseKnowledge::Manual(0.0),
    }
}

fn labelled_pair(var: f64) -> GaussianMixturePrior {
    GaussianMixturePrior::new(vec![0.5, 0.5], vec![vec![1.0; 4], vec![-1.0; 4]], vec![vec![var; 4]; 2])
        .unwrap()
        .with_labels(vec![0, 1], vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.2)
        .unwrap()
}

fn cfg(seed: u64, scale: f64) -> RestorationConfig {
    RestorationConfig {
        seed,
        guidance_scale: scale,
        ..Default::default()
    }
}

#[test]
fn ancestral_sampling_from_a_point_mass() {
    let s = sched();
    let mu = vec![0.7, -1.3, 2.0];
    let p = GaussianMixturePrior::new(vec![1.0], vec![mu.clone()], vec![vec![0.0; 3]]).unwrap();
    for seed in 0..5 {
        let z = sampler::ancestral_sample(&p, &s, &Condition::null(), &cfg(seed, 1.0)).unwrap();
        for (a, b) in z.iter().zip(&mu) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}

#[test]
fn conditional_samples_land_in_their_class() {
    let s = sched();
    let p = labelled_pair(0.05);
    let c = Condition::new(vec![1.0, 0.0]).unwrap();
    let hits = (0..40)
        .filter(|&seed| {
            let z = sampler::ancestral_sample(&p, &s, &c, &cfg(seed, 3.0)).unwrap();
            z.iter().sum::<f64>() > 0.0
        })
        .count();
    assert!(hits >= 38, "{hits}/40");
}

#[test]
fn symmetric_prior_gives_zero_mean_samples() {
    let s = NoiseSchedule::linear(200, 1e-4, 0.1).unwrap();
    let p = labelled_pair(0.1);
    let n = 400;
    let sums: Vec<f64> = (0..n)
        .map(|seed| sampler::ancestral_sample(&p, &s, &Condition::null(), &cfg(seed, 1.0)).unwrap()[0])
        .collect();
    let mean = sums.iter().sum::<f64>() / n as f64;
    // per-coordinate variance is 1 + 0.1 under the prior
    let se = (1.1f64 / n as f64).sqrt();
    assert!(mean.abs() < 4.0 * se, "{mean}");
    let pos = sums.iter().filter(|v| **v > 0.0).count();
    assert!((150..=250).contains(&pos), "{pos}");
}

#[test]
fn noisy_restoration_stays_near_the_measurement() {
    let s = sched();
    let p = labelled_pair(0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let op = DegradationOperator::segment_mask(4, 1, 2).unwrap();
    let z = p.sample_component(0, &mut rng);
    let sigma = 0.1;
    let y: Vec<f64> = op
        .apply(&z)
        .unwrap()
        .iter()
        .zip(op.observed_flags().unwrap())
        .map(|(v, k)| if k { v + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal) } else { *v })
        .collect();
    let obs = observation(op.clone(), y.clone());
    for seed in 0..10 {
        let c = RestorationConfig {
            sigma_y: sigma,
            ..cfg(seed, 1.0)
        };
        let r = sampler::restore(&p, &s, &obs, &Condition::null(), &c).unwrap();
        assert!(r.z0_hat.iter().all(|v| v.is_finite()));
        // observed coordinates are pulled toward y, within a few noise stds
        for i in [0, 3] {
            assert!((r.z0_hat[i] - y[i]).abs() < 5.0 * sigma, "{:?} vs {:?}", r.z0_hat, y);
        }
        // erased coordinates follow the observed component
        assert!(r.z0_hat[1] > 0.0 && r.z0_hat[2] > 0.0);
    }
}

#[test]
fn clean_identity_channel_returns_the_measurement() {
    let s = sched();
    let p = labelled_pair(0.05);
    let y = vec![0.9, 1.1, 1.0, 0.95];
    let obs = observation(DegradationOperator::identity(4), y.clone());
    let r = sampler::restore(&p, &s, &obs, &Condition::null(), &cfg(1, 3.0)).unwrap();
    assert_eq!(r.z0_hat, y);
}

#[test]
fn replace_baseline_keeps_observed_coordinates() {
    let s = sched();
    let p = labelled_pair(0.05);
    let op = DegradationOperator::segment_mask(4, 2, 2).unwrap();
    let y = op.apply(&[1.0, 1.2, 0.0, 0.0]).unwrap();
    let obs = observation(op, y.clone());
    let r = sampler::replace_baseline(&p, &s, &obs, &Condition::null(), &cfg(2, 1.0)).unwrap();
    assert_eq!(&r.z0_hat[..2], &y[..2]);
    assert!(r.z0_hat[2] > 0.0 && r.z0_hat[3] > 0.0);
}

#[test]
fn runs_are_reproducible_per_seed() {
    let s = NoiseSchedule::linear(100, 1e-4, 0.05).unwrap();
    let p = labelled_pair(0.05);
    let obs = observation(DegradationOperator::identity(4), vec![0.5; 4]);
    let c = RestorationConfig {
        sigma_y: 0.3,
        ..cfg(9, 2.0)
    };
    let a = sampler::restore(&p, &s, &obs, &Condition::null(), &c).unwrap();
    let b = sampler::restore(&p, &s, &obs, &Condition::null(), &c).unwrap();
    assert_eq!(a, b);
    let other = sampler::restore(&p, &s, &obs, &Condition::null(), &RestorationConfig { seed: 10, ..c }).unwrap();
    assert_ne!(a.z0_hat, other.z0_hat);
    assert_eq!(a.steps_run, 100);
    assert_eq!(a.diagnostics.len(), 100);
}

#[test]
fn contract_violations_are_errors() {
    let s = sched();
    let p = labelled_pair(0.05);
    let obs = observation(DegradationOperator::identity(3), vec![0.5; 3]);
    assert!(sampler::restore(&p, &s, &obs, &Condition::null(), &cfg(0, 1.0)).is_err());
    let obs = observation(DegradationOperator::identity(4), vec![0.5; 4]);
    let bad = RestorationConfig {
        sigma_y: -1.0,
        ..cfg(0, 1.0)
    };
    assert!(sampler::restore(&p, &s, &obs, &Condition::null(), &bad).is_err());
    assert!(matches!(
        sampler::lambda_gamma(&s, 1, 0.1, LambdaMode::PaperEq14),
        Err(Error::Contract(_))
    ));
}

#[test]
fn diagnostics_csv_has_one_row_per_step() {
    let s = NoiseSchedule::linear(50, 1e-4, 0.05).unwrap();
    let p = labelled_pair(0.05);
    let obs = observation(DegradationOperator::identity(4), vec![0.5; 4]);
    let r = sampler::restore(&p, &s, &obs, &Condition::null(), &RestorationConfig { sigma_y: 0.2, ..cfg(0, 1.0) }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    sampler::write_diagnostics(&path, &r.diagnostics).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 51);
    assert!(text.starts_with("step,lambda,gamma,residual"));
}

proptest! {
    #[test]
    fn lambda_and_gamma_respect_the_budget(
        frac in 0.0f64..1.0,
        sigma_y in 0.0f64..20.0,
        exact in any::<bool>(),
    ) {
        let s = sched();
        let t = 2 + (998.0 * frac) as usize;
        let mode = if exact { LambdaMode::ExactZeroGamma } else { LambdaMode::PaperEq14 };
        let (l, g) = sampler::lambda_gamma(&s, t, sigma_y, mode).unwrap();
        prop_assert!(l > 0.0 && l <= 1.0);
        prop_assert!(g >= 0.0);
        let var = s.posterior_variance(t);
        prop_assert!(((s.z0_coef(t) * l * sigma_y).powi(2) + g - var).abs() <= 1e-12);
        if exact && l < 1.0 {
            prop_assert!(g == 0.0);
        }
        if sigma_y == 0.0 {
            prop_assert_eq!(l, 1.0);
        }
    }
}
