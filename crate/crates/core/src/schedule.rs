//! Diffusion-time bookkeeping.
//!
//! Steps are 1-based: `t` ranges over `1..=T`, and `alpha_bar(0)` is defined
//! as 1 so that the first reverse step has zero posterior variance. Every
//! per-step quantity is tabulated once at construction.

use serde::{Deserialize, Serialize};

use crate::{check_len, Error, Result};

/// Parameters of a linear-beta schedule, as they appear in configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Precomputed forward and reverse coefficients for a discrete diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[0] = 1`, `alpha_bars[t] = prod_{i<=t} alpha_i`.
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
    posterior_sigmas: Vec<f64>,
    z0_coefs: Vec<f64>,
    zt_coefs: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` (step 1) to `beta_end` (step `T`).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "linear schedule requires 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let span = beta_end - beta_start;
        let last = (steps - 1) as f64;
        let betas = (0..steps)
            .map(|i| {
                if i == steps - 1 {
                    beta_end
                } else {
                    beta_start + span * (i as f64 / last)
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit betas, which must be strictly
    /// increasing inside `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Config("schedule needs at least 2 steps".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        if betas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("betas must be strictly increasing".into()));
        }
        Ok(Self::tabulate(betas))
    }

    /// Tabulates all coefficients without checking monotonicity.
    pub(crate) fn tabulate(betas: Vec<f64>) -> Self {
        let steps = betas.len();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let mut posterior_variances = Vec::with_capacity(steps);
        let mut z0_coefs = Vec::with_capacity(steps);
        let mut zt_coefs = Vec::with_capacity(steps);
        for t in 1..=steps {
            let beta = betas[t - 1];
            let ab = alpha_bars[t];
            let ab_prev = alpha_bars[t - 1];
            posterior_variances.push((1.0 - ab_prev) / (1.0 - ab) * beta);
            z0_coefs.push(ab_prev.sqrt() * beta / (1.0 - ab));
            zt_coefs.push(alphas[t - 1].sqrt() * (1.0 - ab_prev) / (1.0 - ab));
        }
        let posterior_sigmas = posterior_variances.iter().map(|v| v.sqrt()).collect();
        Self {
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
            posterior_sigmas,
            z0_coefs,
            zt_coefs,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Posterior variance of `q(z_{t-1} | z_t, z_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variances[t - 1]
    }

    pub fn posterior_sigma(&self, t: usize) -> f64 {
        self.posterior_sigmas[t - 1]
    }

    /// Coefficient of `z_0` in the posterior mean (`c_t`).
    pub fn z0_coef(&self, t: usize) -> f64 {
        self.z0_coefs[t - 1]
    }

    /// Coefficient of `z_t` in the posterior mean.
    pub fn zt_coef(&self, t: usize) -> f64 {
        self.zt_coefs[t - 1]
    }

    fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(Error::Contract(format!(
                "step {t} outside {min}..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Samples `q(z_t | z_0)` given the standard-normal draw `eps`.
    pub fn forward_marginal(&self, z0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t, 1)?;
        check_len("forward_marginal eps", z0.len(), eps.len())?;
        let a = self.alpha_bar(t).sqrt();
        let b = (1.0 - self.alpha_bar(t)).sqrt();
        Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
    }

    /// One forward transition `q(z_t | z_{t-1})`.
    pub fn forward_step(&self, z_prev: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t, 1)?;
        check_len("forward_step eps", z_prev.len(), eps.len())?;
        let a = self.alpha(t).sqrt();
        let b = self.beta(t).sqrt();
        Ok(z_prev.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
    }

    /// Mean and variance of `q(z_{t-1} | z_t, z_0 = z0_hat)` for `t >= 2`.
    pub fn posterior_params(&self, z_t: &[f64], z0_hat: &[f64], t: usize) -> Result<(Vec<f64>, f64)> {
        self.check_step(t, 2)?;
        check_len("posterior_params z0_hat", z_t.len(), z0_hat.len())?;
        let c0 = self.z0_coef(t);
        let ct = self.zt_coef(t);
        let mean = z0_hat
            .iter()
            .zip(z_t)
            .map(|(x0, xt)| c0 * x0 + ct * xt)
            .collect();
        Ok((mean, self.posterior_variance(t)))
    }

    /// Inverts the forward marginal given a noise prediction.
    pub fn estimate_z0(&self, z_t: &[f64], eps_hat: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_step(t, 1)?;
        check_len("estimate_z0 eps_hat", z_t.len(), eps_hat.len())?;
        Ok(self.estimate_z0_unchecked(z_t, eps_hat, t))
    }

    pub(crate) fn estimate_z0_unchecked(&self, z_t: &[f64], eps_hat: &[f64], t: usize) -> Vec<f64> {
        let inv = 1.0 / self.alpha_bar(t).sqrt();
        let s = (1.0 - self.alpha_bar(t)).sqrt();
        z_t.iter()
            .zip(eps_hat)
            .map(|(z, e)| (z - s * e) * inv)
            .collect()
    }

    /// The noise that maps `z0` to `z_t` under the forward marginal.
    pub fn noise_from_z0(&self, z_t: &[f64], z0: &[f64], t: usize) -> Vec<f64> {
        let a = self.alpha_bar(t).sqrt();
        let s = (1.0 - self.alpha_bar(t)).sqrt();
        z_t.iter().zip(z0).map(|(z, x)| (z - a * x) / s).collect()
    }
}
