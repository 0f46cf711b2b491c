//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fail.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use semcom::channel::{self, ChannelSpec, NoiseKnowledge, Observation};
use semcom::denoiser::{Condition, Example, GaussianMixturePrior, TinyDenoiser};
use semcom::harness::{self, Experiment, ExperimentConfig, Method, Task};
use semcom::linop::{DegradationOperator, Mask};
use semcom::metrics::{self, GaussianStats};
use semcom::sampler::{self, LambdaMode, RestorationConfig};
use semcom::schedule::NoiseSchedule;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
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

fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap()
}

fn random_mixture(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GaussianMixturePrior {
    let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let fix = 1.0 - w[1..].iter().sum::<f64>();
    w[0] = fix;
    let means = (0..k).map(|_| normal_vec(rng, d)).collect();
    let vars = (0..k)
        .map(|_| (0..d).map(|_| rng.random_range(0.01..0.3)).collect())
        .collect();
    GaussianMixturePrior::new(w, means, vars).unwrap()
}

fn c1_variance_contract() -> Outcome {
    let s = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let prior = random_mixture(&mut rng, 3, 8);
    let mut worst = 0.0f64;
    let mut steps = 0usize;
    for sigma_y in [0.1, 1.0, 10.0] {
        for mode in [LambdaMode::PaperEq14, LambdaMode::ExactZeroGamma] {
            for run in 0..10u64 {
                let y = normal_vec(&mut rng, 8);
                let obs = observation(DegradationOperator::identity(8), y);
                let cfg = RestorationConfig {
                    sigma_y,
                    lambda_mode: mode,
                    seed: run,
                    guidance_scale: 1.0,
                    ..Default::default()
                };
                let r = sampler::restore(&prior, &s, &obs, &Condition::null(), &cfg).unwrap();
                for d in r.diagnostics.iter().filter(|d| d.step >= 2) {
                    let lhs = (s.z0_coef(d.step) * d.lambda * sigma_y).powi(2) + d.gamma;
                    worst = worst.max((lhs - s.posterior_variance(d.step)).abs());
                    steps += 1;
                }
            }
        }
    }
    outcome(worst <= 1e-12, format!("max |(c λ σy)² + γ − σ²| = {worst:.2e} over {steps} steps"))
}

fn c2_noiseless_consistency() -> Outcome {
    let s = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let d = 64;
    let prior = random_mixture(&mut rng, 4, d);
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let kept: Vec<usize> = (0..d).filter(|_| rng.random::<f64>() < 0.7).collect();
        let op = DegradationOperator::mask(Mask::from_kept(d, &kept).unwrap());
        let (_, z) = prior.sample(&mut rng);
        let y = op.apply(&z).unwrap();
        let obs = observation(op.clone(), y.clone());
        let cfg = RestorationConfig {
            seed: trial,
            guidance_scale: 1.0,
            ..Default::default()
        };
        let r = sampler::restore(&prior, &s, &obs, &Condition::null(), &cfg).unwrap();
        worst = worst.max(op.residual_inf(&r.z0_hat, &y).unwrap());
    }
    outcome(worst <= 1e-6, format!("max ‖A ẑ0 − y‖∞ = {worst:.2e} over 100 trials"))
}

fn c3_linear_gaussian_oracle() -> Outcome {
    let s = default_schedule();
    let d = 8;
    let prior = GaussianMixturePrior::new(vec![1.0], vec![vec![0.0; d]], vec![vec![1.0; d]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let y: Vec<f64> = normal_vec(&mut rng, d).iter().map(|v| v * 2.0f64.sqrt()).collect();
    let obs = observation(DegradationOperator::identity(d), y.clone());
    let runs = 500;
    let mut mean = vec![0.0; d];
    for run in 0..runs {
        let cfg = RestorationConfig {
            sigma_y: 1.0,
            seed: 10_000 + run,
            guidance_scale: 1.0,
            ..Default::default()
        };
        let r = sampler::restore(&prior, &s, &obs, &Condition::null(), &cfg).unwrap();
        for (m, v) in mean.iter_mut().zip(&r.z0_hat) {
            *m += v / runs as f64;
        }
    }
    let target: Vec<f64> = y.iter().map(|v| v / 2.0).collect();
    let err = mean.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ratio = mean.iter().zip(&y).map(|(m, y)| m * y).sum::<f64>() / y.iter().map(|v| v * v).sum::<f64>();
    let rel = err / norm;
    outcome(
        rel <= 0.05,
        format!("relative error {rel:.3} vs y/2 (mean ẑ0 ≈ {ratio:.3}·y)"),
    )
}

fn c4_bit_equality() -> Outcome {
    let s = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let d = 32;
    let prior = random_mixture(&mut rng, 3, d);
    let op = DegradationOperator::segment_mask(d, 10, 6).unwrap();
    let (_, z) = prior.sample(&mut rng);
    let obs = observation(op.clone(), op.apply(&z).unwrap());
    let cfg = RestorationConfig {
        seed: 44,
        record_trajectory: true,
        ..Default::default()
    };
    let a = sampler::restore(&prior, &s, &obs, &Condition::null(), &cfg).unwrap();
    let b = sampler::restore_noiseless(&prior, &s, &obs, &Condition::null(), &cfg).unwrap();
    let same_traj = a.trajectory == b.trajectory && a.trajectory.len() == s.steps();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let same_out = bits(&a.z0_hat) == bits(&b.z0_hat);
    outcome(
        same_traj && same_out,
        format!("{} states compared, trajectory equal: {same_traj}, output equal: {same_out}", a.trajectory.len()),
    )
}

fn cell_means(rows: &[harness::TrialResult], method: Method, f: fn(&harness::TrialResult) -> Option<f64>) -> Vec<f64> {
    let mut idx: Vec<usize> = rows.iter().map(|r| r.psnr_index).collect();
    idx.dedup();
    idx.sort_unstable();
    idx.dedup();
    idx.iter()
        .map(|&i| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.psnr_index == i && r.method == method && r.ok())
                .filter_map(f)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect()
}

fn denoise_rows(knowledge: NoiseKnowledge) -> Vec<harness::TrialResult> {
    let mut cfg = ExperimentConfig::new(Task::Denoise);
    cfg.noise_knowledge = knowledge;
    let exp = Experiment::new(cfg).unwrap();
    harness::run_grid(&exp).unwrap()
}

fn c5_denoising_trend(rows: &[harness::TrialResult]) -> Outcome {
    let restored = cell_means(rows, Method::Restore, |r| r.snr_restored_db);
    let received = cell_means(rows, Method::Restore, |r| r.snr_received_db);
    let gain = restored[0] - received[0];
    let monotone = restored.windows(2).all(|w| w[1] >= w[0]);
    let failed = rows.iter().filter(|r| !r.ok()).count();
    let fmt: Vec<String> = restored.iter().map(|v| format!("{v:.2}")).collect();
    outcome(
        gain >= 3.0 && monotone && failed == 0,
        format!(
            "gain at PSNR 15 = {gain:.2} dB (received {:.2}), restored SNR by PSNR = [{}], failed {failed}",
            received[0],
            fmt.join(", ")
        ),
    )
}

fn c6_inpainting() -> Outcome {
    let exp = Experiment::new(ExperimentConfig::new(Task::Inpaint)).unwrap();
    let rows = harness::run_grid(&exp).unwrap();
    let restore = cell_means(&rows, Method::Restore, |r| r.fd_inp);
    let replace = cell_means(&rows, Method::Replace, |r| r.fd_inp);
    let ok15 = restore[0] <= replace[0];
    let ok175 = restore[1] <= replace[1];
    outcome(
        ok15 && ok175,
        format!(
            "FD_inp restore/replace: PSNR 15 {:.4}/{:.4}, PSNR 17.5 {:.4}/{:.4}",
            restore[0], replace[0], restore[1], replace[1]
        ),
    )
}

fn c7_adaptive(blind: &[harness::TrialResult], known: &[harness::TrialResult]) -> Outcome {
    let b = cell_means(blind, Method::Restore, |r| r.snr_restored_db)[2];
    let k = cell_means(known, Method::Restore, |r| r.snr_restored_db)[2];
    outcome(
        (b - k).abs() <= 1.0,
        format!("PSNR 20: blind {b:.3} dB, known {k:.3} dB, gap {:.3} dB", (b - k).abs()),
    )
}

fn c8_frechet() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let feats: Vec<Vec<f64>> = (0..50).map(|_| normal_vec(&mut rng, 6)).collect();
    let a = metrics::fit_stats(&feats).unwrap();
    let self_fd = metrics::frechet_distance(&a, &a).unwrap();
    let i2 = nalgebra::DMatrix::identity(2, 2);
    let n0 = GaussianStats::new(2, vec![0.0, 0.0], i2.clone()).unwrap();
    let n34 = GaussianStats::new(2, vec![3.0, 4.0], i2).unwrap();
    let fd25 = metrics::frechet_distance(&n0, &n34).unwrap();
    let mut worst_diag = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(1..=8);
        let ma: Vec<f64> = normal_vec(&mut rng, d);
        let mb: Vec<f64> = normal_vec(&mut rng, d);
        let va: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..3.0)).collect();
        let vb: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..3.0)).collect();
        let expected: f64 = (0..d)
            .map(|i| (ma[i] - mb[i]).powi(2) + (va[i].sqrt() - vb[i].sqrt()).powi(2))
            .sum();
        let sa = GaussianStats::new(2, ma, nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(va))).unwrap();
        let sb = GaussianStats::new(2, mb, nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vb))).unwrap();
        worst_diag = worst_diag.max((metrics::frechet_distance(&sa, &sb).unwrap() - expected).abs());
    }
    outcome(
        self_fd.abs() <= 1e-8 && (fd25 - 25.0).abs() <= 1e-6 && worst_diag <= 1e-8,
        format!("FD(a,a) = {self_fd:.1e}, FD = {fd25:.9}, diagonal max error {worst_diag:.1e}"),
    )
}

fn c9_gradient_check() -> Outcome {
    let s = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut model = TinyDenoiser::new(8, 4, 16, &mut rng).unwrap();
    let batch: Vec<Example> = (0..6)
        .map(|i| Example {
            z_t: normal_vec(&mut rng, 8),
            t: rng.random_range(1..=s.steps()),
            cond: if i % 3 == 0 {
                Condition::null()
            } else {
                Condition::new(normal_vec(&mut rng, 4)).unwrap()
            },
            eps: normal_vec(&mut rng, 8),
        })
        .collect();
    let (_, grad) = model.loss_and_grad(&s, &batch).unwrap();
    let base = model.params().to_vec();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let i = rng.random_range(0..base.len());
        let mut p = base.clone();
        p[i] = base[i] + h;
        model.set_params(p.clone()).unwrap();
        let up = model.loss(&s, &batch).unwrap();
        p[i] = base[i] - h;
        model.set_params(p).unwrap();
        let down = model.loss(&s, &batch).unwrap();
        let fd = (up - down) / (2.0 * h);
        let scale = fd.abs().max(grad[i].abs()).max(1e-10);
        worst = worst.max((fd - grad[i]).abs() / scale);
    }
    outcome(worst <= 1e-4, format!("max relative error {worst:.2e} over 100 parameters"))
}

fn c10_forward_statistics() -> Outcome {
    let s = default_schedule();
    let n = 100_000;
    let z0 = 1.5;
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut details = Vec::new();
    let mut passed = true;
    for t in [1, s.steps() / 2, s.steps()] {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let mut z = vec![z0];
            for step in 1..=t {
                let e = [rng.sample::<f64, _>(StandardNormal)];
                z = s.forward_step(&z, step, &e).unwrap();
            }
            sum += z[0];
            sq += z[0] * z[0];
        }
        let nf = n as f64;
        let mean = sum / nf;
        let var = (sq - nf * mean * mean) / (nf - 1.0);
        let m_true = s.alpha_bar(t).sqrt() * z0;
        let v_true = 1.0 - s.alpha_bar(t);
        let se_m = (v_true / nf).sqrt();
        let se_v = v_true * (2.0 / (nf - 1.0)).sqrt();
        let zm = (mean - m_true).abs() / se_m;
        let zv = (var - v_true).abs() / se_v;
        passed &= zm <= 3.0 && zv <= 3.0;
        details.push(format!("t={t}: mean {zm:.2} SE, var {zv:.2} SE"));
    }
    outcome(passed, details.join("; "))
}

fn c11_channel_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let z: Vec<f64> = (0..100_000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let obs = channel::transmit(&z, &[], &ChannelSpec::awgn(15.0, NoiseKnowledge::KnownSigma), &mut rng).unwrap();
    let std = (obs.y.iter().zip(&z).map(|(y, z)| (y - z).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
    let rel = (std - 0.177828).abs() / 0.177828;
    outcome(rel <= 0.01, format!("empirical std {std:.6} (relative error {rel:.4})"))
}

fn c12_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "task = \"inpaint\"\ntrials = 4\npsnr_grid = [15.0, 30.0]\nseed = 12\n[schedule]\nsteps = 200\nbeta_start = 1e-4\nbeta_end = 0.1\n",
    )
    .unwrap();
    let run = |out: &str, workers: &str| {
        let out = dir.path().join(out);
        let status = Command::new(env!("CARGO_BIN_EXE_semcom"))
            .args(["run", "--config"])
            .arg(&cfg)
            .args(["--workers", workers, "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read(out.join("trials.csv")).unwrap()
    };
    let a = run("a", "1");
    let b = run("b", "3");
    outcome(a == b && !a.is_empty(), format!("{} bytes, identical: {}", a.len(), a == b))
}

fn main() -> ExitCode {
    let mut all = true;
    let mut report = |id: &str, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let passed = o.passed && in_time;
        all &= passed;
        let timing = match limit {
            Some(l) => format!("{:.1}s / {}s", elapsed.as_secs_f64(), l.as_secs()),
            None => format!("{:.1}s", elapsed.as_secs_f64()),
        };
        println!(
            "{} {id:<4} {name:<32} {} [{timing}]",
            if passed { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    let secs = |s: u64| Some(Duration::from_secs(s));

    report("C1", "variance contract", secs(10), &mut c1_variance_contract);
    report("C2", "noiseless consistency", secs(60), &mut c2_noiseless_consistency);
    report("C3", "linear-Gaussian posterior oracle", secs(120), &mut c3_linear_gaussian_oracle);
    report("C4", "noiseless bit equality", None, &mut c4_bit_equality);
    let mut blind = Vec::new();
    report("C5", "denoising trend", secs(600), &mut || {
        blind = denoise_rows(NoiseKnowledge::AdaptiveEq16);
        c5_denoising_trend(&blind)
    });
    report("C6", "inpainting head-to-head", secs(600), &mut c6_inpainting);
    report("C7", "adaptive sigma_y", None, &mut || {
        let known = denoise_rows(NoiseKnowledge::KnownSigma);
        c7_adaptive(&blind, &known)
    });
    report("C8", "Fréchet exactness", None, &mut c8_frechet);
    report("C9", "gradient check", None, &mut c9_gradient_check);
    report("C10", "forward-process statistics", None, &mut c10_forward_statistics);
    report("C11", "channel calibration", None, &mut c11_channel_calibration);
    report("C12", "run determinism", None, &mut c12_determinism);

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
