//! Fast invariant checks run by `semcom selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::channel::{self, ChannelSpec, NoiseKnowledge, Observation};
use crate::denoiser::{Condition, Example, GaussianMixturePrior, TinyDenoiser};
use crate::linop::DegradationOperator;
use crate::metrics::{self, GaussianStats};
use crate::sampler::{self, LambdaMode, RestorationConfig};
use crate::schedule::NoiseSchedule;
use crate::Result;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
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

/// Runs every check with a reduced schedule.
pub fn run() -> Vec<Check> {
    let schedule = NoiseSchedule::linear(200, 1e-4, 0.04).expect("static schedule");
    let d = 16;
    let prior = GaussianMixturePrior::new(
        vec![0.5, 0.5],
        vec![vec![1.0; d], vec![-1.0; d]],
        vec![vec![0.04; d]; 2],
    )
    .expect("static prior");
    let mut out = Vec::new();

    out.push(check("variance budget", || {
        let mut worst = 0.0f64;
        for sigma_y in [0.1, 1.0, 10.0] {
            for mode in [LambdaMode::PaperEq14, LambdaMode::ExactZeroGamma] {
                for t in 2..=schedule.steps() {
                    let (l, g) = sampler::lambda_gamma(&schedule, t, sigma_y, mode)?;
                    let lhs = (schedule.z0_coef(t) * l * sigma_y).powi(2) + g;
                    worst = worst.max((lhs - schedule.posterior_variance(t)).abs());
                }
            }
        }
        Ok((worst <= 1e-12, format!("max error {worst:.2e}")))
    }));

    out.push(check("noiseless consistency", || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, z) = prior.sample(&mut rng);
        let op = DegradationOperator::segment_mask(d, 4, 4)?;
        let obs = observation(op.clone(), op.apply(&z)?);
        let r = sampler::restore(&prior, &schedule, &obs, &Condition::null(), &RestorationConfig::default())?;
        let res = op.residual_inf(&r.z0_hat, &obs.y)?;
        Ok((res <= 1e-6, format!("residual {res:.2e}")))
    }));

    out.push(check("noiseless bit equality", || {
        let op = DegradationOperator::segment_mask(d, 2, 5)?;
        let obs = observation(op.clone(), op.apply(&vec![0.5; d])?);
        let cfg = RestorationConfig {
            seed: 7,
            record_trajectory: true,
            ..Default::default()
        };
        let a = sampler::restore(&prior, &schedule, &obs, &Condition::null(), &cfg)?;
        let b = sampler::restore_noiseless(&prior, &schedule, &obs, &Condition::null(), &cfg)?;
        Ok((a == b, String::new()))
    }));

    out.push(check("frechet exactness", || {
        let a = GaussianStats::new(2, vec![0.0, 0.0], nalgebra::DMatrix::identity(2, 2))?;
        let b = GaussianStats::new(2, vec![3.0, 4.0], nalgebra::DMatrix::identity(2, 2))?;
        let fd = metrics::frechet_distance(&a, &b)?;
        let self_fd = metrics::frechet_distance(&a, &a)?;
        Ok((
            (fd - 25.0).abs() <= 1e-6 && self_fd.abs() <= 1e-8,
            format!("FD {fd}, self {self_fd:.1e}"),
        ))
    }));

    out.push(check("channel calibration", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Vec<f64> = (0..100_000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let obs = channel::transmit(&z, &[], &ChannelSpec::awgn(15.0, NoiseKnowledge::KnownSigma), &mut rng)?;
        let n = z.len() as f64;
        let std = (obs.y.iter().zip(&z).map(|(y, z)| (y - z).powi(2)).sum::<f64>() / n).sqrt();
        let rel = (std - 0.177828).abs() / 0.177828;
        Ok((rel <= 0.01, format!("std {std:.6}")))
    }));

    out.push(check("tiny denoiser gradient", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = TinyDenoiser::new(4, 2, 6, &mut rng)?;
        let batch: Vec<Example> = (0..4)
            .map(|_| {
                let t = rng.random_range(1..=schedule.steps());
                Ok(Example {
                    z_t: (0..4).map(|_| rng.sample(StandardNormal)).collect(),
                    t,
                    cond: Condition::new(vec![0.3, -0.2])?,
                    eps: (0..4).map(|_| rng.sample(StandardNormal)).collect(),
                })
            })
            .collect::<Result<_>>()?;
        let (_, grad) = model.loss_and_grad(&schedule, &batch)?;
        let base = model.params().to_vec();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[i] += h;
            model.set_params(p.clone())?;
            let up = model.loss(&schedule, &batch)?;
            p[i] -= 2.0 * h;
            model.set_params(p)?;
            let down = model.loss(&schedule, &batch)?;
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs()).max(1e-8);
            worst = worst.max((fd - grad[i]).abs() / scale);
        }
        model.set_params(base)?;
        Ok((worst <= 1e-4, format!("max relative error {worst:.2e}")))
    }));

    out
}
