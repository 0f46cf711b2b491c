//! PSNR-calibrated channel and receiver-side noise level estimation.
//!
//! Erasure happens before noise: dropped coordinates carry nothing and read
//! as zero in the received vector, with the kept-index set travelling in the
//! [`Observation`]'s operator.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linop::DegradationOperator;
use crate::{Error, Result};

/// Gaussian consistency constant for the median absolute deviation.
const MAD_SCALE: f64 = 0.6745;

/// Contiguous loss of a fraction of the latent time axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErasureSpec {
    pub start_fraction: f64,
    pub length_fraction: f64,
}

impl ErasureSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.start_fraction)
            && (0.0..=1.0).contains(&self.length_fraction)
            && self.start_fraction + self.length_fraction <= 1.0 + 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "erasure fractions ({}, {}) must lie in [0, 1] with start + length <= 1",
                self.start_fraction, self.length_fraction
            )))
        }
    }

    /// Frames `[start, start + len)` lost out of `total` frames.
    pub fn frame_range(&self, total: usize) -> Result<Range<usize>> {
        self.validate()?;
        let start = (self.start_fraction * total as f64).round() as usize;
        let len = (self.length_fraction * total as f64).round() as usize;
        let end = (start + len).min(total);
        Ok(start..end)
    }

    /// Mask over a frame-major latent of `dim` coordinates.
    pub fn operator(&self, dim: usize, frame_len: usize) -> Result<DegradationOperator> {
        if frame_len == 0 || !dim.is_multiple_of(frame_len) {
            return Err(Error::Config(format!(
                "latent dim {dim} is not a whole number of frames of length {frame_len}"
            )));
        }
        let frames = self.frame_range(dim / frame_len)?;
        DegradationOperator::segment_mask(
            dim,
            frames.start * frame_len,
            frames.len() * frame_len,
        )
    }
}

/// What the receiver knows about the channel noise when setting `sigma_y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKnowledge {
    /// The true channel std, rescaled by the received data range.
    #[serde(rename = "known")]
    KnownSigma,
    /// Blind MAD estimate, rescaled by the received data range.
    #[serde(rename = "adaptive")]
    AdaptiveEq16,
    /// Fixed `sigma_y` supplied by the operator.
    Manual(f64),
}

/// Which received signal the noise level is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    Latent,
    Condition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    /// Channel quality; `f64::INFINITY` disables noise.
    pub psnr_db: f64,
    #[serde(default)]
    pub erasure: Option<ErasureSpec>,
    pub noise_knowledge: NoiseKnowledge,
    /// Latent frame length used to map erasure fractions to coordinates.
    #[serde(default = "one")]
    pub frame_len: usize,
    /// Whether AWGN hits the latent. The embedding is always noised.
    #[serde(default = "yes")]
    pub noise_latent: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ChannelSpec {
    pub fn awgn(psnr_db: f64, noise_knowledge: NoiseKnowledge) -> Self {
        Self {
            psnr_db,
            erasure: None,
            noise_knowledge,
            frame_len: 1,
            noise_latent: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.psnr_db.is_nan() || self.psnr_db == f64::NEG_INFINITY {
            return Err(Error::Config(format!("psnr_db must be finite or +inf, got {}", self.psnr_db)));
        }
        if let NoiseKnowledge::Manual(v) = self.noise_knowledge {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("manual sigma_y must be finite and >= 0, got {v}")));
            }
        }
        if let Some(e) = &self.erasure {
            e.validate()?;
        }
        Ok(())
    }
}

/// What the receiver gets.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: Vec<f64>,
    pub operator: DegradationOperator,
    /// True latent noise std; only populated for [`NoiseKnowledge::KnownSigma`].
    pub sigma_y_true: Option<f64>,
    /// True embedding noise std; only populated for [`NoiseKnowledge::KnownSigma`].
    pub cond_sigma_true: Option<f64>,
    pub condition_received: Vec<f64>,
    pub knowledge: NoiseKnowledge,
}

/// Mean square of `x`.
pub fn signal_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Channel noise std for a given PSNR and signal power.
pub fn sigma_from_psnr(psnr_db: f64, power: f64) -> Result<f64> {
    if !(power > 0.0 && power.is_finite()) {
        return Err(Error::Config(format!("signal power must be positive, got {power}")));
    }
    if psnr_db.is_nan() {
        return Err(Error::Config("psnr_db is NaN".into()));
    }
    Ok((power / 10f64.powf(psnr_db / 10.0)).sqrt())
}

/// Sends `z` and its semantic embedding `cond` through the channel.
pub fn transmit<R: Rng + ?Sized>(
    z: &[f64],
    cond: &[f64],
    spec: &ChannelSpec,
    rng: &mut R,
) -> Result<Observation> {
    spec.validate()?;
    let power = signal_power(z);
    if power == 0.0 {
        return Err(Error::Config("cannot transmit an all-zero latent".into()));
    }
    let sigma_c = sigma_from_psnr(spec.psnr_db, power)?;
    let operator = match &spec.erasure {
        Some(e) => e.operator(z.len(), spec.frame_len)?,
        None => DegradationOperator::identity(z.len()),
    };
    let flags = operator.observed_flags().unwrap_or_else(|| vec![true; z.len()]);
    let latent_sigma = if spec.noise_latent { sigma_c } else { 0.0 };
    let mut y = operator.apply(z)?;
    if latent_sigma > 0.0 {
        for (v, kept) in y.iter_mut().zip(&flags) {
            if *kept {
                let n: f64 = rng.sample(StandardNormal);
                *v += latent_sigma * n;
            }
        }
    }

    let cond_power = signal_power(cond);
    let cond_sigma = if cond_power > 0.0 {
        sigma_from_psnr(spec.psnr_db, cond_power)?
    } else {
        0.0
    };
    let condition_received = cond
        .iter()
        .map(|c| {
            if cond_sigma > 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                c + cond_sigma * n
            } else {
                *c
            }
        })
        .collect();

    let known = spec.noise_knowledge == NoiseKnowledge::KnownSigma;
    Ok(Observation {
        y,
        operator,
        sigma_y_true: known.then_some(latent_sigma),
        cond_sigma_true: known.then_some(cond_sigma),
        condition_received,
        knowledge: spec.noise_knowledge,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mad_sigma(mut diffs: Vec<f64>) -> Result<f64> {
    if diffs.len() < 15 {
        return Err(Error::Estimation(format!(
            "need at least 16 observed coordinates, got {}",
            diffs.len() + 1
        )));
    }
    let med = median(&mut diffs);
    let mut dev: Vec<f64> = diffs.iter().map(|d| (d - med).abs()).collect();
    Ok(median(&mut dev) / (std::f64::consts::SQRT_2 * MAD_SCALE))
}

/// Blind noise std from the MAD of first differences.
pub fn estimate_noise_std(y: &[f64]) -> Result<f64> {
    mad_sigma(y.windows(2).map(|w| w[1] - w[0]).collect())
}

/// As [`estimate_noise_std`], using only differences between adjacent
/// observed coordinates.
pub fn estimate_noise_std_observed(y: &[f64], observed: &[bool]) -> Result<f64> {
    crate::check_len("estimate_noise_std observed flags", y.len(), observed.len())?;
    let diffs = (1..y.len())
        .filter(|&i| observed[i] && observed[i - 1])
        .map(|i| y[i] - y[i - 1])
        .collect();
    mad_sigma(diffs)
}

/// Adaptive receiver noise level: data range times the noise std.
pub fn adaptive_sigma_y(y: &[f64], sigma_y: f64) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Contract("adaptive_sigma_y on an empty vector".into()));
    }
    if !(sigma_y >= 0.0) {
        return Err(Error::Contract(format!("sigma_y must be >= 0, got {sigma_y}")));
    }
    let (lo, hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    Ok((hi - lo) * sigma_y)
}

impl Observation {
    /// Received latent values on observed coordinates only.
    pub fn observed_values(&self) -> Vec<f64> {
        match self.operator.observed_flags() {
            Some(flags) => self
                .y
                .iter()
                .zip(&flags)
                .filter(|(_, k)| **k)
                .map(|(v, _)| *v)
                .collect(),
            None => self.y.clone(),
        }
    }

    /// The `sigma_y` the receiver feeds to the sampler.
    pub fn receiver_sigma(&self, source: SigmaSource) -> Result<f64> {
        if let NoiseKnowledge::Manual(v) = self.knowledge {
            return Ok(v);
        }
        let (data, truth) = match source {
            SigmaSource::Latent => (self.observed_values(), self.sigma_y_true),
            SigmaSource::Condition => (self.condition_received.clone(), self.cond_sigma_true),
        };
        let sigma = match self.knowledge {
            NoiseKnowledge::KnownSigma => truth.ok_or_else(|| {
                Error::Contract("observation carries no true noise level".into())
            })?,
            NoiseKnowledge::AdaptiveEq16 => match source {
                SigmaSource::Latent => match self.operator.observed_flags() {
                    Some(flags) => estimate_noise_std_observed(&self.y, &flags)?,
                    None => estimate_noise_std(&self.y)?,
                },
                SigmaSource::Condition => estimate_noise_std(&data)?,
            },
            NoiseKnowledge::Manual(_) => unreachable!(),
        };
        adaptive_sigma_y(&data, sigma)
    }
}
