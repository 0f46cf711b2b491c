//! Experiment orchestration: configs, data sources, per-trial runs over a
//! PSNR grid and deterministic CSV outputs.
//!
//! Seeds are derived with SHA-256 from the master seed and a label path, so
//! any cell or trial can be rerun on its own:
//!
//! * content (ground truth and label): `(master, task, "content", trial)`,
//!   shared by every PSNR cell so all cells see the same test set;
//! * channel: `(master, task, "channel", psnr_index, trial)`;
//! * sampler: `(master, task, "sampler", psnr_index, trial)`, shared by all
//!   methods of the trial;
//! * reference statistics: `(master, task, "reference")`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{self, FrameCodec};
use crate::channel::{self, ChannelSpec, ErasureSpec, NoiseKnowledge, Observation, SigmaSource};
use crate::denoiser::{
    train_tiny_denoiser, Condition, GaussianMixturePrior, NoiseModel, TinyDenoiser, TrainConfig, TrainReport,
    TrainingSample,
};
use crate::metrics::{self, GaussianStats};
use crate::sampler::{self, LambdaMode, RestorationConfig, RestorationResult};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Denoise,
    Inpaint,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Inpaint => "inpaint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Range-null restoration with noise-aware scaling.
    Restore,
    /// Replacement baseline.
    Replace,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Restore => "restore",
            Method::Replace => "replace",
        }
    }
}

/// Sampler settings shared by every trial; `sigma_y` and `seed` are set per
/// trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub guidance_scale: f64,
    pub lambda_mode: LambdaMode,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            guidance_scale: 3.0,
            lambda_mode: LambdaMode::PaperEq14,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub frames: usize,
    pub bins: usize,
    pub labels: usize,
    #[serde(default = "one")]
    pub variants: usize,
    #[serde(default = "default_within_std")]
    pub within_std: f64,
    #[serde(default = "one_u64")]
    pub template_seed: u64,
    #[serde(default)]
    pub conditioning: ConditioningConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToneConfig {
    pub frames: usize,
    #[serde(default = "default_frame_len")]
    pub frame_len: usize,
    pub retained: usize,
    /// One fundamental per label.
    pub f0s: Vec<f64>,
    pub amplitudes: Vec<f64>,
    /// Relative random detuning of each clip.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
    /// Clips used to fit the per-label Gaussians of the oracle.
    #[serde(default = "default_fit_samples")]
    pub fit_samples: usize,
    #[serde(default)]
    pub conditioning: ConditioningConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditioningConfig {
    pub embedding_dim: usize,
    pub temperature: f64,
    pub hard_snap: bool,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            temperature: 0.1,
            hard_snap: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Mixture(MixtureConfig),
    Tone(ToneConfig),
}

impl DataConfig {
    pub fn default_for(task: Task) -> Self {
        let (frames, bins, labels, variants) = match task {
            Task::Denoise => (32, 16, 4, 1),
            Task::Inpaint => (40, 8, 3, 3),
        };
        DataConfig::Mixture(MixtureConfig {
            frames,
            bins,
            labels,
            variants,
            within_std: default_within_std(),
            template_seed: 1,
            conditioning: ConditioningConfig::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserConfig {
    #[default]
    Oracle,
    Tiny {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_train_samples")]
    pub samples: usize,
    pub output: PathBuf,
    #[serde(default)]
    pub hyper: TrainConfig,
}

fn one() -> usize {
    1
}
fn one_u64() -> u64 {
    1
}
fn default_within_std() -> f64 {
    0.05
}
fn default_frame_len() -> usize {
    64
}
fn default_rate() -> u32 {
    audio::DEFAULT_SAMPLE_RATE
}
fn default_fit_samples() -> usize {
    400
}
fn default_train_samples() -> usize {
    2000
}
fn default_grid() -> Vec<f64> {
    vec![15.0, 17.5, 20.0, 30.0]
}
fn default_trials() -> usize {
    100
}
fn default_reference() -> usize {
    300
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default = "default_grid")]
    pub psnr_grid: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default = "default_knowledge")]
    pub noise_knowledge: NoiseKnowledge,
    /// Defaults to the latent for denoising and the embedding for inpainting.
    #[serde(default)]
    pub sigma_source: Option<SigmaSource>,
    /// Defaults to true for denoising and false for inpainting.
    #[serde(default)]
    pub noise_latent: Option<bool>,
    /// Inpainting only; defaults to a 10% gap starting at 40%.
    #[serde(default)]
    pub erasure: Option<ErasureSpec>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default = "default_reference")]
    pub reference_samples: usize,
    /// Defaults to `[restore]` for denoising and `[restore, replace]` for
    /// inpainting.
    #[serde(default)]
    pub methods: Option<Vec<Method>>,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    /// Trials per cell whose per-step diagnostics are written.
    #[serde(default)]
    pub diagnostics_trials: usize,
    /// Trials per cell decoded to WAV.
    #[serde(default)]
    pub audition_trials: usize,
    #[serde(default)]
    pub train: Option<TrainSection>,
}

fn default_knowledge() -> NoiseKnowledge {
    NoiseKnowledge::AdaptiveEq16
}

impl ExperimentConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            psnr_grid: default_grid(),
            trials: default_trials(),
            seed: 0,
            workers: 0,
            output_dir: default_output(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerSettings::default(),
            noise_knowledge: default_knowledge(),
            sigma_source: None,
            noise_latent: None,
            erasure: None,
            data: None,
            reference_samples: default_reference(),
            methods: None,
            denoiser: DenoiserConfig::Oracle,
            diagnostics_trials: 0,
            audition_trials: 0,
            train: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.psnr_grid.is_empty() {
            return Err(Error::Config("psnr_grid must not be empty".into()));
        }
        if self.reference_samples < 2 {
            return Err(Error::Config("reference_samples must be >= 2".into()));
        }
        if self.methods().is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.task == Task::Denoise && self.erasure.is_some() {
            return Err(Error::Config("erasure applies to the inpaint task only".into()));
        }
        for &p in &self.psnr_grid {
            ChannelSpec::awgn(p, self.noise_knowledge).validate()?;
        }
        self.erasure().map(|e| e.validate()).transpose()?;
        Ok(())
    }

    pub fn methods(&self) -> Vec<Method> {
        self.methods.clone().unwrap_or_else(|| match self.task {
            Task::Denoise => vec![Method::Restore],
            Task::Inpaint => vec![Method::Restore, Method::Replace],
        })
    }

    pub fn sigma_source(&self) -> SigmaSource {
        self.sigma_source.unwrap_or(match self.task {
            Task::Denoise => SigmaSource::Latent,
            Task::Inpaint => SigmaSource::Condition,
        })
    }

    pub fn noise_latent(&self) -> bool {
        self.noise_latent.unwrap_or(self.task == Task::Denoise)
    }

    pub fn erasure(&self) -> Option<ErasureSpec> {
        match self.task {
            Task::Denoise => None,
            Task::Inpaint => Some(self.erasure.unwrap_or(ErasureSpec {
                start_fraction: 0.4,
                length_fraction: 0.1,
            })),
        }
    }

    pub fn data(&self) -> DataConfig {
        self.data.clone().unwrap_or_else(|| DataConfig::default_for(self.task))
    }
}

/// SHA-256 of the master seed followed by the label parts, truncated to 64
/// bits.
pub fn derive_seed(master: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

fn unit_embeddings(labels: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..labels)
        .map(|l| {
            let e: Vec<f64> = (0..dim)
                .map(|i| {
                    (std::f64::consts::PI * (l + 1) as f64 * i as f64 / dim as f64 + 0.3 * l as f64).cos()
                })
                .collect();
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            e.into_iter().map(|v| v / norm).collect()
        })
        .collect()
}

/// Labelled mixture of smooth spectro-temporal templates: a Gaussian bump
/// across bins times a slow envelope across frames, frame-major.
pub fn template_mixture(cfg: &MixtureConfig) -> Result<GaussianMixturePrior> {
    if cfg.frames == 0 || cfg.bins == 0 || cfg.labels == 0 || cfg.variants == 0 {
        return Err(Error::Config("mixture sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.template_seed);
    let (f, r) = (cfg.frames, cfg.bins);
    let mut means = Vec::new();
    let mut labels = Vec::new();
    for l in 0..cfg.labels {
        let center: f64 = rng.random_range(0.0..1.0) * (r as f64 - 2.0).max(0.0) + 1.0f64.min(r as f64 / 2.0);
        for _ in 0..cfg.variants {
            let offset: f64 = if cfg.variants > 1 { rng.random_range(-1.5..1.5) } else { 0.0 };
            let rate: f64 = rng.random_range(0.5..2.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let spectrum: Vec<f64> = (0..r)
                .map(|j| (-0.5 * (j as f64 - center - offset).powi(2)).exp())
                .collect();
            let mut mean = Vec::with_capacity(f * r);
            for fr in 0..f {
                let env = 0.6 + 0.4 * (std::f64::consts::TAU * fr as f64 / f as f64 * rate + phase).sin();
                mean.extend(spectrum.iter().map(|s| env * s));
            }
            means.push(mean);
            labels.push(l);
        }
    }
    let k = means.len();
    let power = means.iter().flatten().map(|v| v * v).sum::<f64>() / (k * f * r) as f64;
    let scale = 1.0 / power.sqrt();
    for m in &mut means {
        m.iter_mut().for_each(|v| *v *= scale);
    }
    let var = cfg.within_std * cfg.within_std;
    let prior = GaussianMixturePrior::new(vec![1.0 / k as f64; k], means, vec![vec![var; f * r]; k])?;
    let c = &cfg.conditioning;
    Ok(prior
        .with_labels(labels, unit_embeddings(cfg.labels, c.embedding_dim), c.temperature)?
        .with_hard_snap(c.hard_snap))
}

/// Where ground-truth latents come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Mixture {
        prior: GaussianMixturePrior,
        frame_len: usize,
    },
    Tone {
        cfg: ToneConfig,
        codec: FrameCodec,
        embeddings: Vec<Vec<f64>>,
        /// Per-label Gaussian fit used by the oracle denoiser.
        prior: GaussianMixturePrior,
    },
}

impl DataSource {
    pub fn build(cfg: &DataConfig, seed: u64) -> Result<Self> {
        match cfg {
            DataConfig::Mixture(m) => Ok(DataSource::Mixture {
                prior: template_mixture(m)?,
                frame_len: m.bins,
            }),
            DataConfig::Tone(t) => {
                if t.f0s.is_empty() {
                    return Err(Error::Config("tone data needs at least one f0".into()));
                }
                let codec = FrameCodec::new(t.frame_len, t.retained)?;
                let embeddings = unit_embeddings(t.f0s.len(), t.conditioning.embedding_dim);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"tone-fit"]));
                let samples = (0..t.fit_samples)
                    .map(|_| {
                        let l = rng.random_range(0..t.f0s.len());
                        Ok((l, tone_latent(t, &codec, l, &mut rng)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let fitted = GaussianMixturePrior::fit_labeled(&samples, t.f0s.len(), 1e-6)?;
                let labels = fitted.labels().to_vec();
                let c = &t.conditioning;
                let prior = fitted
                    .with_labels(labels, embeddings.clone(), c.temperature)?
                    .with_hard_snap(c.hard_snap);
                Ok(DataSource::Tone {
                    cfg: t.clone(),
                    codec,
                    embeddings,
                    prior,
                })
            }
        }
    }

    pub fn prior(&self) -> &GaussianMixturePrior {
        match self {
            DataSource::Mixture { prior, .. } | DataSource::Tone { prior, .. } => prior,
        }
    }

    /// Coordinates per latent frame.
    pub fn frame_len(&self) -> usize {
        match self {
            DataSource::Mixture { frame_len, .. } => *frame_len,
            DataSource::Tone { cfg, .. } => cfg.retained,
        }
    }

    pub fn dim(&self) -> usize {
        self.prior().dim()
    }

    pub fn embedding(&self, label: usize) -> &[f64] {
        match self {
            DataSource::Mixture { prior, .. } => &prior.label_embeddings()[label],
            DataSource::Tone { embeddings, .. } => &embeddings[label],
        }
    }

    /// Draws `(label, z0)`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, Vec<f64>)> {
        match self {
            DataSource::Mixture { prior, .. } => {
                let (k, z) = prior.sample(rng);
                Ok((prior.labels()[k], z))
            }
            DataSource::Tone { cfg, codec, .. } => {
                let l = rng.random_range(0..cfg.f0s.len());
                Ok((l, tone_latent(cfg, codec, l, rng)?))
            }
        }
    }

    /// Codec used to turn latents into audio for listening.
    pub fn audition_codec(&self) -> Result<FrameCodec> {
        match self {
            DataSource::Mixture { frame_len, .. } => FrameCodec::new(64.max(*frame_len), *frame_len),
            DataSource::Tone { codec, .. } => Ok(codec.clone()),
        }
    }

    pub fn sample_rate(&self) -> u32 {
        match self {
            DataSource::Mixture { .. } => audio::DEFAULT_SAMPLE_RATE,
            DataSource::Tone { cfg, .. } => cfg.sample_rate,
        }
    }
}

fn tone_latent<R: Rng + ?Sized>(cfg: &ToneConfig, codec: &FrameCodec, label: usize, rng: &mut R) -> Result<Vec<f64>> {
    let detune = 1.0 + cfg.jitter * (2.0 * rng.random::<f64>() - 1.0);
    let spec = audio::ToneSpec {
        f0: cfg.f0s[label] * detune,
        amplitudes: cfg.amplitudes.clone(),
        duration: (cfg.frames * cfg.frame_len) as f64 / cfg.sample_rate as f64,
        sample_rate: cfg.sample_rate,
    };
    let w = audio::synth(&spec, rng)?;
    Ok(codec.encode(&w))
}

/// The noise predictor used by the sampler.
#[derive(Debug, Clone)]
pub enum Backend {
    Oracle(GaussianMixturePrior),
    Tiny(TinyDenoiser),
}

impl NoiseModel for Backend {
    fn dim(&self) -> usize {
        match self {
            Backend::Oracle(p) => p.dim(),
            Backend::Tiny(m) => m.dim(),
        }
    }

    fn predict(&self, s: &NoiseSchedule, z_t: &[f64], t: usize, cond: &Condition) -> Result<Vec<f64>> {
        match self {
            Backend::Oracle(p) => p.predict(s, z_t, t, cond),
            Backend::Tiny(m) => m.predict(s, z_t, t, cond),
        }
    }

    fn predict_pair(&self, s: &NoiseSchedule, z_t: &[f64], t: usize, cond: &Condition) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Backend::Oracle(p) => p.predict_pair(s, z_t, t, cond),
            Backend::Tiny(m) => m.predict_pair(s, z_t, t, cond),
        }
    }
}

/// One row of `trials.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub task: Task,
    pub method: Method,
    pub psnr_db: f64,
    pub psnr_index: usize,
    pub trial: usize,
    pub label: usize,
    /// `ok`, or the error that stopped the trial.
    pub status: String,
    pub snr_restored_db: Option<f64>,
    pub snr_received_db: Option<f64>,
    pub fd_all: Option<f64>,
    pub fd_inp: Option<f64>,
    pub residual: Option<f64>,
    pub sigma_y: Option<f64>,
    #[serde(skip)]
    pub wall_ms: f64,
}

impl TrialResult {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Everything a trial needs, built once per experiment.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub schedule: NoiseSchedule,
    pub data: DataSource,
    pub backend: Backend,
    reference_all: GaussianStats,
    reference_inp: Option<GaussianStats>,
    inp_frames: Option<std::ops::Range<usize>>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule.build()?;
        let data = DataSource::build(&cfg.data(), cfg.seed)?;
        let backend = match &cfg.denoiser {
            DenoiserConfig::Oracle => Backend::Oracle(data.prior().clone()),
            DenoiserConfig::Tiny { path } => {
                let m = TinyDenoiser::load(path)?;
                if m.dim() != data.dim() || m.cond_dim() != data.prior().embedding_dim() {
                    return Err(Error::Config(format!(
                        "model {} has dim {} / cond {}, data needs {} / {}",
                        path.display(),
                        m.dim(),
                        m.cond_dim(),
                        data.dim(),
                        data.prior().embedding_dim()
                    )));
                }
                Backend::Tiny(m)
            }
        };
        let fl = data.frame_len();
        let inp_frames = cfg
            .erasure()
            .map(|e| e.frame_range(data.dim() / fl))
            .transpose()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[cfg.task.as_str().as_bytes(), b"reference"]));
        let mut all = Vec::new();
        let mut inp = Vec::new();
        for _ in 0..cfg.reference_samples {
            let (_, z) = data.draw(&mut rng)?;
            all.extend(metrics::all_frames(&z, fl)?);
            if let Some(r) = &inp_frames {
                inp.extend(metrics::region_features(&z, r.clone(), fl)?);
            }
        }
        let reference_all = metrics::fit_stats(&all)?;
        let reference_inp = if inp_frames.is_some() {
            Some(metrics::fit_stats(&inp)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            schedule,
            data,
            backend,
            reference_all,
            reference_inp,
            inp_frames,
        })
    }

    fn channel_spec(&self, psnr_db: f64) -> ChannelSpec {
        ChannelSpec {
            psnr_db,
            erasure: self.cfg.erasure(),
            noise_knowledge: self.cfg.noise_knowledge,
            frame_len: self.data.frame_len(),
            noise_latent: self.cfg.noise_latent(),
        }
    }

    fn seed(&self, tag: &[u8], psnr_index: usize, trial: usize) -> u64 {
        derive_seed(
            self.cfg.seed,
            &[
                self.cfg.task.as_str().as_bytes(),
                tag,
                &(psnr_index as u64).to_le_bytes(),
                &(trial as u64).to_le_bytes(),
            ],
        )
    }

    /// Ground truth of trial `trial`, identical in every PSNR cell.
    pub fn content(&self, trial: usize) -> Result<(usize, Vec<f64>)> {
        let seed = derive_seed(
            self.cfg.seed,
            &[self.cfg.task.as_str().as_bytes(), b"content", &(trial as u64).to_le_bytes()],
        );
        self.data.draw(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Runs every configured method on one `(cell, trial)`.
    pub fn run_trial(&self, psnr_index: usize, trial: usize) -> Vec<TrialResult> {
        let psnr_db = self.cfg.psnr_grid[psnr_index];
        let methods = self.cfg.methods();
        let base = |method: Method, label: usize| TrialResult {
            task: self.cfg.task,
            method,
            psnr_db,
            psnr_index,
            trial,
            label,
            status: "ok".into(),
            snr_restored_db: None,
            snr_received_db: None,
            fd_all: None,
            fd_inp: None,
            residual: None,
            sigma_y: None,
            wall_ms: 0.0,
        };
        let prepared = (|| -> Result<_> {
            let (label, z0) = self.content(trial)?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed(b"channel", psnr_index, trial));
            let obs = channel::transmit(&z0, self.data.embedding(label), &self.channel_spec(psnr_db), &mut rng)?;
            let sigma_y = obs.receiver_sigma(self.cfg.sigma_source())?;
            Ok((label, z0, obs, sigma_y))
        })();
        let (label, z0, obs, sigma_y) = match prepared {
            Ok(p) => p,
            Err(e) => {
                return methods
                    .iter()
                    .map(|m| TrialResult {
                        status: format!("failed: {e}"),
                        ..base(*m, 0)
                    })
                    .collect()
            }
        };
        methods
            .iter()
            .map(|&method| {
                let start = Instant::now();
                let outcome = self.run_method(method, psnr_index, trial, &z0, &obs, sigma_y);
                let wall_ms = start.elapsed().as_secs_f64() * 1e3;
                match outcome {
                    Ok(mut r) => {
                        r.wall_ms = wall_ms;
                        r.task = self.cfg.task;
                        r.method = method;
                        r.psnr_db = psnr_db;
                        r.psnr_index = psnr_index;
                        r.trial = trial;
                        r.label = label;
                        r
                    }
                    Err(e) => TrialResult {
                        status: format!("failed: {e}"),
                        wall_ms,
                        ..base(method, label)
                    },
                }
            })
            .collect()
    }

    fn run_method(
        &self,
        method: Method,
        psnr_index: usize,
        trial: usize,
        z0: &[f64],
        obs: &Observation,
        sigma_y: f64,
    ) -> Result<TrialResult> {
        let rcfg = RestorationConfig {
            guidance_scale: self.cfg.sampler.guidance_scale,
            sigma_y,
            lambda_mode: self.cfg.sampler.lambda_mode,
            seed: self.seed(b"sampler", psnr_index, trial),
            record_trajectory: false,
        };
        let cond = Condition::new(obs.condition_received.clone())?;
        let result = self.restore_with(method, obs, &cond, &rcfg)?;
        if trial < self.cfg.diagnostics_trials {
            let dir = self.cfg.output_dir.join("diagnostics");
            fs::create_dir_all(&dir)?;
            let name = format!("{}_psnr{}_trial{}.csv", method.as_str(), psnr_index, trial);
            sampler::write_diagnostics(&dir.join(name), &result.diagnostics)?;
        }
        if trial < self.cfg.audition_trials {
            self.write_audition(method, psnr_index, trial, z0, &obs.y, &result.z0_hat)?;
        }
        self.score(z0, obs, sigma_y, &result)
    }

    fn restore_with(
        &self,
        method: Method,
        obs: &Observation,
        cond: &Condition,
        rcfg: &RestorationConfig,
    ) -> Result<RestorationResult> {
        match method {
            Method::Restore => sampler::restore(&self.backend, &self.schedule, obs, cond, rcfg),
            Method::Replace => sampler::replace_baseline(&self.backend, &self.schedule, obs, cond, rcfg),
        }
    }

    fn score(&self, z0: &[f64], obs: &Observation, sigma_y: f64, result: &RestorationResult) -> Result<TrialResult> {
        let fl = self.data.frame_len();
        let z = &result.z0_hat;
        let fd_all = metrics::frechet_distance(&metrics::fit_stats(&metrics::all_frames(z, fl)?)?, &self.reference_all)?;
        let fd_inp = match (&self.inp_frames, &self.reference_inp) {
            (Some(r), Some(reference)) => {
                let feats = metrics::region_features(z, r.clone(), fl)?;
                Some(metrics::frechet_distance(&metrics::fit_stats(&feats)?, reference)?)
            }
            _ => None,
        };
        let flags = obs.operator.observed_flags().unwrap_or_else(|| vec![true; z.len()]);
        Ok(TrialResult {
            task: self.cfg.task,
            method: Method::Restore,
            psnr_db: 0.0,
            psnr_index: 0,
            trial: 0,
            label: 0,
            status: "ok".into(),
            snr_restored_db: Some(metrics::snr_db(z0, z)?),
            snr_received_db: Some(metrics::snr_db(z0, &obs.y)?),
            fd_all: Some(fd_all),
            fd_inp,
            residual: Some(metrics::observed_residual(z, &obs.y, &flags)?),
            sigma_y: Some(sigma_y),
            wall_ms: 0.0,
        })
    }

    fn write_audition(
        &self,
        method: Method,
        psnr_index: usize,
        trial: usize,
        z0: &[f64],
        y: &[f64],
        restored: &[f64],
    ) -> Result<()> {
        let codec = self.data.audition_codec()?;
        let dir = self.cfg.output_dir.join("audio");
        fs::create_dir_all(&dir)?;
        let clean = codec.decode(z0)?;
        let peak = clean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let gain = if peak > 0.0 { 0.9 / peak } else { 1.0 };
        let rate = self.data.sample_rate();
        let stem = format!("psnr{psnr_index}_trial{trial}");
        let write = |name: String, latent: &[f64]| -> Result<()> {
            let w: Vec<f64> = codec.decode(latent)?.iter().map(|v| v * gain).collect();
            audio::write_wav(&dir.join(name), &w, rate)
        };
        write(format!("{stem}_clean.wav"), z0)?;
        write(format!("{stem}_received.wav"), y)?;
        write(format!("{stem}_{}.wav", method.as_str()), restored)
    }
}

/// Runs trial `trial` of cell `psnr_index` for a denoising experiment.
pub fn run_denoise_trial(exp: &Experiment, psnr_index: usize, trial: usize) -> Result<Vec<TrialResult>> {
    if exp.cfg.task != Task::Denoise {
        return Err(Error::Config("experiment is not a denoising task".into()));
    }
    Ok(exp.run_trial(psnr_index, trial))
}

/// Runs trial `trial` of cell `psnr_index` for an inpainting experiment.
pub fn run_inpaint_trial(exp: &Experiment, psnr_index: usize, trial: usize) -> Result<Vec<TrialResult>> {
    if exp.cfg.task != Task::Inpaint {
        return Err(Error::Config("experiment is not an inpainting task".into()));
    }
    Ok(exp.run_trial(psnr_index, trial))
}

/// Every `(cell, trial)` in deterministic order; rows are ordered by cell,
/// then trial, then method.
pub fn run_grid(exp: &Experiment) -> Result<Vec<TrialResult>> {
    let jobs: Vec<(usize, usize)> = (0..exp.cfg.psnr_grid.len())
        .flat_map(|p| (0..exp.cfg.trials).map(move |t| (p, t)))
        .collect();
    let run = || -> Vec<TrialResult> {
        jobs.par_iter()
            .map(|&(p, t)| exp.run_trial(p, t))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    };
    if exp.cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(exp.cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(run))
    } else {
        Ok(run())
    }
}

/// Aggregates of one `(method, psnr)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub task: Task,
    pub method: Method,
    pub psnr_db: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub snr_restored_mean: Option<f64>,
    pub snr_restored_std: Option<f64>,
    pub snr_received_mean: Option<f64>,
    pub snr_received_std: Option<f64>,
    pub fd_all_mean: Option<f64>,
    pub fd_all_std: Option<f64>,
    pub fd_inp_mean: Option<f64>,
    pub fd_inp_std: Option<f64>,
    pub residual_mean: Option<f64>,
    pub sigma_y_mean: Option<f64>,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

/// Per-cell aggregates over successful trials, in first-seen order.
pub fn summarize(rows: &[TrialResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Method, usize, f64, Task)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|k| k.0 == r.method && k.1 == r.psnr_index) {
            keys.push((r.method, r.psnr_index, r.psnr_db, r.task));
        }
    }
    keys.into_iter()
        .map(|(method, idx, psnr_db, task)| {
            let cell: Vec<&TrialResult> = rows
                .iter()
                .filter(|r| r.method == method && r.psnr_index == idx)
                .collect();
            let ok: Vec<&TrialResult> = cell.iter().copied().filter(|r| r.ok()).collect();
            let stat = |f: fn(&TrialResult) -> Option<f64>| {
                let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                mean_std(&v)
            };
            let snr = stat(|r| r.snr_restored_db);
            let rec = stat(|r| r.snr_received_db);
            let fa = stat(|r| r.fd_all);
            let fi = stat(|r| r.fd_inp);
            SummaryRow {
                task,
                method,
                psnr_db,
                n_ok: ok.len(),
                n_failed: cell.len() - ok.len(),
                snr_restored_mean: snr.map(|s| s.0),
                snr_restored_std: snr.map(|s| s.1),
                snr_received_mean: rec.map(|s| s.0),
                snr_received_std: rec.map(|s| s.1),
                fd_all_mean: fa.map(|s| s.0),
                fd_all_std: fa.map(|s| s.1),
                fd_inp_mean: fi.map(|s| s.0),
                fd_inp_std: fi.map(|s| s.1),
                residual_mean: stat(|r| r.residual).map(|s| s.0),
                sigma_y_mean: stat(|r| r.sigma_y).map(|s| s.0),
            }
        })
        .collect()
}

pub fn write_trials(path: &Path, rows: &[TrialResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialResult>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<TrialResult>, _>>()?)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn fmt_cell(v: Option<(f64, f64)>) -> String {
    match v {
        Some((m, s)) => format!("{m:.3} ± {s:.3}"),
        None => String::new(),
    }
}

/// Wide table: one row per method, PSNR columns with metric sub-columns.
fn write_table(path: &Path, task: Task, summary: &[SummaryRow]) -> Result<()> {
    let mut psnrs: Vec<f64> = Vec::new();
    let mut methods: Vec<Method> = Vec::new();
    for s in summary {
        if !psnrs.contains(&s.psnr_db) {
            psnrs.push(s.psnr_db);
        }
        if !methods.contains(&s.method) {
            methods.push(s.method);
        }
    }
    let metrics: &[&str] = match task {
        Task::Denoise => &["snr_db", "fd_all"],
        Task::Inpaint => &["fd_all", "fd_inp"],
    };
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method".to_string()];
    for p in &psnrs {
        for m in metrics {
            header.push(format!("{m}@{p}"));
        }
    }
    w.write_record(&header)?;
    for method in methods {
        let mut row = vec![method.as_str().to_string()];
        for p in &psnrs {
            let s = summary.iter().find(|s| s.method == method && s.psnr_db == *p);
            for m in metrics {
                let v = s.and_then(|s| match *m {
                    "snr_db" => s.snr_restored_mean.zip(s.snr_restored_std),
                    "fd_all" => s.fd_all_mean.zip(s.fd_all_std),
                    _ => s.fd_inp_mean.zip(s.fd_inp_std),
                });
                row.push(fmt_cell(v));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SeriesRow<'a> {
    method: &'a str,
    metric: &'a str,
    psnr_db: f64,
    mean: f64,
    std: f64,
    n: usize,
}

fn write_series(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut rows = Vec::new();
    for s in summary {
        let series = [
            ("snr_restored_db", s.snr_restored_mean.zip(s.snr_restored_std)),
            ("snr_received_db", s.snr_received_mean.zip(s.snr_received_std)),
            ("fd_all", s.fd_all_mean.zip(s.fd_all_std)),
            ("fd_inp", s.fd_inp_mean.zip(s.fd_inp_std)),
        ];
        for (metric, v) in series {
            if let Some((mean, std)) = v {
                rows.push(SeriesRow {
                    method: s.method.as_str(),
                    metric,
                    psnr_db: s.psnr_db,
                    mean,
                    std,
                    n: s.n_ok,
                });
            }
        }
    }
    write_rows(path, &rows)
}

#[derive(Serialize)]
struct TimingRow {
    method: Method,
    psnr_index: usize,
    trial: usize,
    wall_ms: f64,
}

/// Output of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunReport {
    pub trials: Vec<TrialResult>,
    pub summary: Vec<SummaryRow>,
    pub failed: usize,
}

/// Runs the grid and writes `trials.csv`, `summary.csv`, `table.csv`,
/// `series.csv` and `timings.csv` under the output directory. Aggregates are
/// computed from the re-read `trials.csv`.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<RunReport> {
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    let exp = Experiment::new(cfg)?;
    let rows = run_grid(&exp)?;
    let trials_path = out.join("trials.csv");
    write_trials(&trials_path, &rows)?;
    let timings: Vec<TimingRow> = rows
        .iter()
        .map(|r| TimingRow {
            method: r.method,
            psnr_index: r.psnr_index,
            trial: r.trial,
            wall_ms: r.wall_ms,
        })
        .collect();
    write_rows(&out.join("timings.csv"), &timings)?;
    let persisted = read_trials(&trials_path)?;
    let summary = summarize(&persisted);
    write_rows(&out.join("summary.csv"), &summary)?;
    write_table(&out.join("table.csv"), exp.cfg.task, &summary)?;
    write_series(&out.join("series.csv"), &summary)?;
    let failed = persisted.iter().filter(|r| !r.ok()).count();
    Ok(RunReport {
        trials: persisted,
        summary,
        failed,
    })
}

/// Trains a tiny denoiser on data drawn from the configured source and
/// saves it to `train.output`.
pub fn train_from_config(cfg: &ExperimentConfig) -> Result<(TinyDenoiser, TrainReport, PathBuf)> {
    let section = cfg
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [train] section".into()))?;
    let data = DataSource::build(&cfg.data(), cfg.seed)?;
    let schedule = cfg.schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[b"train-data"]));
    let samples = (0..section.samples)
        .map(|_| {
            let (l, z0) = data.draw(&mut rng)?;
            Ok(TrainingSample {
                z0,
                cond: Some(data.embedding(l).to_vec()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (model, report) = train_tiny_denoiser(&samples, &schedule, &section.hyper)?;
    if let Some(parent) = section.output.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    model.save(&section.output)?;
    Ok((model, report, section.output.clone()))
}
