//! Reverse-process samplers.
//!
//! [`restore`] runs range-null restoration with per-step scaling of the
//! range correction (`lambda_t`) and of the injected noise (`gamma_t`) so the
//! state carries exactly the posterior noise level even though `y` is noisy.
//! [`restore_noiseless`], [`ancestral_sample`] and [`replace_baseline`] are
//! the plain variants it is compared against.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::Observation;
use crate::denoiser::{predict_noise, Condition, NoiseModel};
use crate::linop::DegradationOperator;
use crate::schedule::NoiseSchedule;
use crate::{check_len, Error, Result};

/// Tolerance on negative `gamma_t` before it counts as a violation.
const GAMMA_TOL: f64 = 1e-12;

/// How `lambda_t` is set when the channel noise exceeds the step's budget.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// `lambda_t = sigma_t / sigma_y`.
    #[default]
    PaperEq14,
    /// `lambda_t = sigma_t / (c_t sigma_y)`, which drives `gamma_t` to zero.
    ExactZeroGamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorationConfig {
    pub guidance_scale: f64,
    /// Receiver-side noise level of `y`.
    pub sigma_y: f64,
    pub lambda_mode: LambdaMode,
    pub seed: u64,
    /// Keep every intermediate `z_t` in the result.
    pub record_trajectory: bool,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 3.0,
            sigma_y: 0.0,
            lambda_mode: LambdaMode::PaperEq14,
            seed: 0,
            record_trajectory: false,
        }
    }
}

impl RestorationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_y >= 0.0 && self.sigma_y.is_finite()) {
            return Err(Error::Config(format!("sigma_y must be finite and >= 0, got {}", self.sigma_y)));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Config(format!(
                "guidance_scale must be finite and >= 0, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostic {
    pub step: usize,
    pub lambda: f64,
    pub gamma: f64,
    /// `|A z0_hat - y|_inf` after the step's correction.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestorationResult {
    pub z0_hat: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostic>,
    /// `z_T, z_{T-1}, ..., z_1` when requested.
    pub trajectory: Vec<Vec<f64>>,
    pub steps_run: usize,
}

/// `(lambda_t, gamma_t)` for `t >= 2`.
pub fn lambda_gamma(s: &NoiseSchedule, t: usize, sigma_y: f64, mode: LambdaMode) -> Result<(f64, f64)> {
    if t < 2 || t > s.steps() {
        return Err(Error::Contract(format!("lambda_gamma step {t} outside 2..={}", s.steps())));
    }
    if !(sigma_y >= 0.0) {
        return Err(Error::Contract(format!("sigma_y must be >= 0, got {sigma_y}")));
    }
    let sigma_t = s.posterior_sigma(t);
    let var_t = s.posterior_variance(t);
    let c_t = s.z0_coef(t);
    if sigma_t >= c_t * sigma_y {
        let gamma = var_t - (c_t * sigma_y).powi(2);
        return Ok((1.0, clamp_gamma(gamma, t)?));
    }
    match mode {
        LambdaMode::PaperEq14 => {
            let lambda = sigma_t / sigma_y;
            let gamma = var_t - (c_t * lambda * sigma_y).powi(2);
            Ok((lambda, clamp_gamma(gamma, t)?))
        }
        LambdaMode::ExactZeroGamma => Ok((sigma_t / (c_t * sigma_y), 0.0)),
    }
}

fn clamp_gamma(gamma: f64, step: usize) -> Result<f64> {
    if gamma < -GAMMA_TOL {
        return Err(Error::Invariant {
            step,
            detail: format!("gamma_t = {gamma:e} is negative"),
        });
    }
    Ok(gamma.max(0.0))
}

fn standard_normal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn check_finite(z: &[f64], step: usize) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { step })
    }
}

/// `A†((1 - lambda) A z + lambda y) + (I - A†A) z`. Equal to
/// `z - lambda A†(A z - y)`, and at `lambda = 1` bit-identical to
/// [`DegradationOperator::combine_solution`].
fn scaled_correction(op: &DegradationOperator, z: &[f64], y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let az = op.apply(z)?;
    let mixed: Vec<f64> = az.iter().zip(y).map(|(a, y)| (1.0 - lambda) * a + lambda * y).collect();
    let base = op.pinv_apply(&mixed)?;
    let (_, null) = op.decompose(z)?;
    Ok(base.iter().zip(&null).map(|(b, n)| b + n).collect())
}

/// `c_t z0_hat + d_t z_t + noise_scale * eps`.
fn posterior_step(s: &NoiseSchedule, t: usize, z0_hat: &[f64], z_t: &[f64], noise_scale: f64, eps: &[f64]) -> Vec<f64> {
    let c = s.z0_coef(t);
    let d = s.zt_coef(t);
    z0_hat
        .iter()
        .zip(z_t)
        .zip(eps)
        .map(|((x0, z), e)| c * x0 + d * z + noise_scale * e)
        .collect()
}

fn check_inputs<M: NoiseModel + ?Sized>(model: &M, obs: &Observation, cfg: &RestorationConfig) -> Result<()> {
    cfg.validate()?;
    check_len("observation operator input", model.dim(), obs.operator.dim_in())?;
    check_len("observation y", obs.operator.dim_out(), obs.y.len())
}

/// Noisy range-null restoration.
pub fn restore<M: NoiseModel + ?Sized>(
    model: &M,
    s: &NoiseSchedule,
    obs: &Observation,
    cond: &Condition,
    cfg: &RestorationConfig,
) -> Result<RestorationResult> {
    check_inputs(model, obs, cfg)?;
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = standard_normal(&mut rng, d);
    let mut diagnostics = Vec::with_capacity(s.steps());
    let mut trajectory = Vec::new();
    let mut lambda_prev = 1.0;
    for t in (1..=s.steps()).rev() {
        if cfg.record_trajectory {
            trajectory.push(z.clone());
        }
        let eps_hat = predict_noise(model, s, &z, t, cond, cfg.guidance_scale)?;
        let z0 = s.estimate_z0_unchecked(&z, &eps_hat, t);
        let (lambda, gamma) = if t >= 2 {
            lambda_gamma(s, t, cfg.sigma_y, cfg.lambda_mode)?
        } else {
            (lambda_prev, 0.0)
        };
        lambda_prev = lambda;
        let z0_hat = scaled_correction(&obs.operator, &z0, &obs.y, lambda)?;
        check_finite(&z0_hat, t)?;
        diagnostics.push(StepDiagnostic {
            step: t,
            lambda,
            gamma,
            residual: obs.operator.residual_inf(&z0_hat, &obs.y)?,
        });
        if t == 1 {
            return Ok(RestorationResult {
                z0_hat,
                diagnostics,
                trajectory,
                steps_run: s.steps(),
            });
        }
        let eps = standard_normal(&mut rng, d);
        z = posterior_step(s, t, &z0_hat, &z, gamma.sqrt(), &eps);
        check_finite(&z, t)?;
    }
    unreachable!("schedule has at least two steps")
}

/// Noiseless range-null restoration: `A† y + (I - A†A) z0_t` at every step.
pub fn restore_noiseless<M: NoiseModel + ?Sized>(
    model: &M,
    s: &NoiseSchedule,
    obs: &Observation,
    cond: &Condition,
    cfg: &RestorationConfig,
) -> Result<RestorationResult> {
    check_inputs(model, obs, cfg)?;
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = standard_normal(&mut rng, d);
    let mut diagnostics = Vec::with_capacity(s.steps());
    let mut trajectory = Vec::new();
    for t in (1..=s.steps()).rev() {
        if cfg.record_trajectory {
            trajectory.push(z.clone());
        }
        let eps_hat = predict_noise(model, s, &z, t, cond, cfg.guidance_scale)?;
        let z0 = s.estimate_z0_unchecked(&z, &eps_hat, t);
        let z0_hat = obs.operator.combine_solution(&obs.y, &z0)?;
        check_finite(&z0_hat, t)?;
        let gamma = if t >= 2 { s.posterior_variance(t) } else { 0.0 };
        diagnostics.push(StepDiagnostic {
            step: t,
            lambda: 1.0,
            gamma,
            residual: obs.operator.residual_inf(&z0_hat, &obs.y)?,
        });
        if t == 1 {
            return Ok(RestorationResult {
                z0_hat,
                diagnostics,
                trajectory,
                steps_run: s.steps(),
            });
        }
        let eps = standard_normal(&mut rng, d);
        z = posterior_step(s, t, &z0_hat, &z, s.posterior_sigma(t), &eps);
        check_finite(&z, t)?;
    }
    unreachable!("schedule has at least two steps")
}

/// Plain reverse diffusion with guidance and no measurement.
pub fn ancestral_sample<M: NoiseModel + ?Sized>(
    model: &M,
    s: &NoiseSchedule,
    cond: &Condition,
    cfg: &RestorationConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = standard_normal(&mut rng, d);
    for t in (1..=s.steps()).rev() {
        let eps_hat = predict_noise(model, s, &z, t, cond, cfg.guidance_scale)?;
        let z0 = s.estimate_z0_unchecked(&z, &eps_hat, t);
        check_finite(&z0, t)?;
        if t == 1 {
            return Ok(z0);
        }
        let eps = standard_normal(&mut rng, d);
        z = posterior_step(s, t, &z0, &z, s.posterior_sigma(t), &eps);
        check_finite(&z, t)?;
    }
    unreachable!("schedule has at least two steps")
}

/// Replacement baseline: the observed region of each intermediate state is
/// overwritten by a forward-noised copy of `A† y`.
pub fn replace_baseline<M: NoiseModel + ?Sized>(
    model: &M,
    s: &NoiseSchedule,
    obs: &Observation,
    cond: &Condition,
    cfg: &RestorationConfig,
) -> Result<RestorationResult> {
    check_inputs(model, obs, cfg)?;
    let d = model.dim();
    let known = obs.operator.pinv_apply(&obs.y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = standard_normal(&mut rng, d);
    let mut diagnostics = Vec::with_capacity(s.steps());
    let mut trajectory = Vec::new();
    for t in (1..=s.steps()).rev() {
        if cfg.record_trajectory {
            trajectory.push(z.clone());
        }
        let eps_hat = predict_noise(model, s, &z, t, cond, cfg.guidance_scale)?;
        let z0 = s.estimate_z0_unchecked(&z, &eps_hat, t);
        check_finite(&z0, t)?;
        if t == 1 {
            let z0_hat = obs.operator.combine_solution(&obs.y, &z0)?;
            diagnostics.push(StepDiagnostic {
                step: t,
                lambda: 1.0,
                gamma: 0.0,
                residual: obs.operator.residual_inf(&z0_hat, &obs.y)?,
            });
            return Ok(RestorationResult {
                z0_hat,
                diagnostics,
                trajectory,
                steps_run: s.steps(),
            });
        }
        let eps = standard_normal(&mut rng, d);
        let generated = posterior_step(s, t, &z0, &z, s.posterior_sigma(t), &eps);
        let eps_known = standard_normal(&mut rng, d);
        let noised = s.forward_marginal(&known, t - 1, &eps_known)?;
        let (range, _) = obs.operator.decompose(&noised)?;
        let (_, null) = obs.operator.decompose(&generated)?;
        z = range.iter().zip(&null).map(|(r, n)| r + n).collect();
        check_finite(&z, t)?;
        diagnostics.push(StepDiagnostic {
            step: t,
            lambda: 1.0,
            gamma: s.posterior_variance(t),
            residual: obs.operator.residual_inf(&z0, &obs.y)?,
        });
    }
    unreachable!("schedule has at least two steps")
}

/// Writes per-step diagnostics as CSV.
pub fn write_diagnostics(path: &Path, diagnostics: &[StepDiagnostic]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for d in diagnostics {
        w.serialize(d)?;
    }
    w.flush()?;
    Ok(())
}
