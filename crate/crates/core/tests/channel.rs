use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use semcom::channel::{self, ChannelSpec, ErasureSpec, NoiseKnowledge, SigmaSource};
use semcom::Error;

fn ramp(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * 1e-4).sin() + 0.2).collect()
}

#[test]
fn mad_estimate_recovers_white_noise_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for sigma in [0.01, 0.3, 2.0] {
        // a slow signal contributes almost nothing to first differences
        let y: Vec<f64> = ramp(20_000)
            .iter()
            .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let est = channel::estimate_noise_std(&y).unwrap();
        assert!((est / sigma - 1.0).abs() < 0.03, "sigma {sigma}: {est}");
    }
}

#[test]
fn masked_estimate_ignores_erased_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 4000;
    let observed: Vec<bool> = (0..n).map(|i| !(1000..2000).contains(&i)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            if observed[i] {
                0.1 * rng.sample::<f64, _>(StandardNormal)
            } else {
                1e6 * (i % 3) as f64
            }
        })
        .collect();
    let est = channel::estimate_noise_std_observed(&y, &observed).unwrap();
    assert!((est / 0.1 - 1.0).abs() < 0.06, "{est}");
}

#[test]
fn estimator_needs_enough_samples() {
    assert!(matches!(channel::estimate_noise_std(&[0.0; 15]), Err(Error::Estimation(_))));
    assert!(channel::estimate_noise_std(&[0.0; 16]).is_ok());
    let flags = [true, false].repeat(20);
    assert!(matches!(
        channel::estimate_noise_std_observed(&[0.0; 40], &flags),
        Err(Error::Estimation(_))
    ));
}

#[test]
fn infinite_psnr_is_a_clean_channel() {
    let z = ramp(64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let obs = channel::transmit(&z, &[1.0, -1.0], &ChannelSpec::awgn(f64::INFINITY, NoiseKnowledge::KnownSigma), &mut rng)
        .unwrap();
    assert_eq!(obs.y, z);
    assert_eq!(obs.condition_received, vec![1.0, -1.0]);
    assert_eq!(obs.receiver_sigma(SigmaSource::Latent).unwrap(), 0.0);
}

#[test]
fn erasure_without_latent_noise_keeps_observed_values() {
    let z = ramp(100);
    let spec = ChannelSpec {
        psnr_db: 10.0,
        erasure: Some(ErasureSpec {
            start_fraction: 0.4,
            length_fraction: 0.1,
        }),
        noise_knowledge: NoiseKnowledge::KnownSigma,
        frame_len: 5,
        noise_latent: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let emb = vec![0.5; 8];
    let obs = channel::transmit(&z, &emb, &spec, &mut rng).unwrap();
    let flags = obs.operator.observed_flags().unwrap();
    assert_eq!(flags.iter().filter(|k| !**k).count(), 10);
    assert!(!flags[40] && !flags[49] && flags[39] && flags[50]);
    for i in (0..100).filter(|&i| flags[i]) {
        assert_eq!(obs.y[i], z[i]);
    }
    assert_eq!(obs.sigma_y_true, Some(0.0));
    // the embedding still goes through the noisy channel
    assert!(obs.condition_received != emb);
    assert!(obs.cond_sigma_true.unwrap() > 0.0);
}

#[test]
fn transmit_is_deterministic_per_seed() {
    let z = ramp(50);
    let spec = ChannelSpec::awgn(20.0, NoiseKnowledge::AdaptiveEq16);
    let a = channel::transmit(&z, &[], &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = channel::transmit(&z, &[], &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let c = channel::transmit(&z, &[], &spec, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.y, c.y);
    assert!(a.sigma_y_true.is_none());
}

#[test]
fn invalid_channels_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(channel::transmit(&[0.0; 8], &[], &ChannelSpec::awgn(10.0, NoiseKnowledge::KnownSigma), &mut rng).is_err());
    assert!(channel::transmit(&[1.0; 8], &[], &ChannelSpec::awgn(f64::NAN, NoiseKnowledge::KnownSigma), &mut rng).is_err());
    let bad = ErasureSpec {
        start_fraction: 0.8,
        length_fraction: 0.3,
    };
    assert!(bad.validate().is_err());
    assert!(channel::transmit(&[1.0; 8], &[], &ChannelSpec::awgn(10.0, NoiseKnowledge::Manual(-1.0)), &mut rng).is_err());
}

proptest! {
    #[test]
    fn sigma_inverts_psnr(psnr in -10.0f64..60.0, power in 1e-6f64..1e3) {
        let s = channel::sigma_from_psnr(psnr, power).unwrap();
        let back = 10.0 * (power / (s * s)).log10();
        prop_assert!((back - psnr).abs() < 1e-9);
    }

    #[test]
    fn adaptive_sigma_scales_with_range(
        y in prop::collection::vec(-100.0f64..100.0, 1..64),
        s in 0.0f64..2.0,
    ) {
        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let got = channel::adaptive_sigma_y(&y, s).unwrap();
        prop_assert!((got - (hi - lo) * s).abs() <= 1e-12 * (1.0 + got.abs()));
    }

    #[test]
    fn frame_range_stays_in_bounds(start in 0.0f64..1.0, len in 0.0f64..1.0, total in 1usize..500) {
        let spec = ErasureSpec { start_fraction: start, length_fraction: len };
        match spec.frame_range(total) {
            Ok(r) => prop_assert!(r.start <= r.end && r.end <= total),
            Err(_) => prop_assert!(start + len > 1.0),
        }
    }
}
