//! Noise-prediction backends.
//!
//! [`GaussianMixturePrior`] is an exact denoiser for a diagonal Gaussian
//! mixture; [`TinyDenoiser`] is a two-layer network trained by hand-written
//! backprop. Both implement [`NoiseModel`], and [`predict_noise`] adds
//! guidance on top.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::schedule::NoiseSchedule;
use crate::{check_len, Error, Result};

/// Semantic side information passed to the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub embedding: Vec<f64>,
    /// Unconditional evaluation; the embedding is ignored.
    pub null: bool,
}

impl Condition {
    pub fn new(embedding: Vec<f64>) -> Result<Self> {
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("condition embedding has non-finite entries".into()));
        }
        Ok(Self {
            embedding,
            null: false,
        })
    }

    pub fn null() -> Self {
        Self {
            embedding: Vec::new(),
            null: true,
        }
    }
}

/// A model of the noise added by the forward process.
pub trait NoiseModel: Sync {
    /// Latent dimension.
    fn dim(&self) -> usize;

    fn predict(&self, schedule: &NoiseSchedule, z_t: &[f64], t: usize, cond: &Condition) -> Result<Vec<f64>>;

    /// Unconditional and conditional predictions for the same input.
    fn predict_pair(
        &self,
        schedule: &NoiseSchedule,
        z_t: &[f64],
        t: usize,
        cond: &Condition,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let uncond = self.predict(schedule, z_t, t, &Condition::null())?;
        let c = self.predict(schedule, z_t, t, cond)?;
        Ok((uncond, c))
    }
}

/// Guided prediction `eps_u + s (eps_c - eps_u)`.
pub fn predict_noise<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    z_t: &[f64],
    t: usize,
    cond: &Condition,
    guidance_scale: f64,
) -> Result<Vec<f64>> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::Contract(format!("step {t} outside 1..={}", schedule.steps())));
    }
    check_len("predict_noise z_t", model.dim(), z_t.len())?;
    if cond.null || guidance_scale == 0.0 {
        return model.predict(schedule, z_t, t, &Condition::null());
    }
    if guidance_scale == 1.0 {
        return model.predict(schedule, z_t, t, cond);
    }
    let (u, c) = model.predict_pair(schedule, z_t, t, cond)?;
    Ok(u.iter()
        .zip(&c)
        .map(|(u, c)| u + guidance_scale * (c - u))
        .collect())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Diagonal Gaussian mixture with labelled components.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixturePrior {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    labels: Vec<usize>,
    label_embeddings: Vec<Vec<f64>>,
    temperature: f64,
    hard_snap: bool,
}

impl GaussianMixturePrior {
    /// Each component gets its own label and no embeddings.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        check_len("mixture means", k, means.len())?;
        check_len("mixture variances", k, variances.len())?;
        let d = means[0].len();
        if d == 0 {
            return Err(Error::Config("mixture dimension must be positive".into()));
        }
        for (m, v) in means.iter().zip(&variances) {
            check_len("mixture mean", d, m.len())?;
            check_len("mixture variance", d, v.len())?;
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config("mixture mean has non-finite entries".into()));
            }
            if v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return Err(Error::Config("mixture variances must be finite and >= 0".into()));
            }
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("mixture weights must be >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self {
            weights,
            means,
            variances,
            labels: (0..k).collect(),
            label_embeddings: Vec::new(),
            temperature: 1.0,
            hard_snap: false,
        })
    }

    /// Attaches semantic labels and one embedding per label. A received
    /// embedding `c` scores label `l` by `-|c - e_l|^2 / (2 tau^2)`.
    pub fn with_labels(mut self, labels: Vec<usize>, embeddings: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        check_len("component labels", self.weights.len(), labels.len())?;
        if let Some(l) = labels.iter().find(|l| **l >= embeddings.len()) {
            return Err(Error::Config(format!("label {l} has no embedding")));
        }
        let k = embeddings.first().map_or(0, Vec::len);
        if k == 0 || embeddings.iter().any(|e| e.len() != k) {
            return Err(Error::Config("label embeddings must share a positive length".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        self.labels = labels;
        self.label_embeddings = embeddings;
        self.temperature = temperature;
        Ok(self)
    }

    /// Decode received embeddings to the single nearest label.
    pub fn with_hard_snap(mut self, hard: bool) -> Self {
        self.hard_snap = hard;
        self
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_embeddings(&self) -> &[Vec<f64>] {
        &self.label_embeddings
    }

    pub fn embedding_dim(&self) -> usize {
        self.label_embeddings.first().map_or(0, Vec::len)
    }

    /// Draws `(component, z0)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        (k, self.sample_component(k, rng))
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<f64> {
        self.means[k]
            .iter()
            .zip(&self.variances[k])
            .map(|(m, v)| {
                let n: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * n
            })
            .collect()
    }

    /// Log-weights over components given a condition.
    pub fn component_log_weights(&self, cond: &Condition) -> Result<Vec<f64>> {
        let log_w: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        if cond.null {
            return Ok(log_w);
        }
        if self.label_embeddings.is_empty() {
            return Err(Error::Contract("prior has no label embeddings for a conditional query".into()));
        }
        check_len("condition embedding", self.embedding_dim(), cond.embedding.len())?;
        let n_labels = self.label_embeddings.len();
        let mut label_mass = vec![0.0; n_labels];
        for (w, l) in self.weights.iter().zip(&self.labels) {
            label_mass[*l] += w;
        }
        let two_tau2 = 2.0 * self.temperature * self.temperature;
        let mut label_ll: Vec<f64> = self
            .label_embeddings
            .iter()
            .zip(&label_mass)
            .map(|(e, mass)| {
                let dist: f64 = e.iter().zip(&cond.embedding).map(|(a, b)| (a - b).powi(2)).sum();
                mass.ln() - dist / two_tau2
            })
            .collect();
        if self.hard_snap {
            let best = label_ll
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            for (i, v) in label_ll.iter_mut().enumerate() {
                *v = if i == best { 0.0 } else { f64::NEG_INFINITY };
            }
        } else {
            let norm = log_sum_exp(&label_ll);
            for v in &mut label_ll {
                *v -= norm;
            }
        }
        Ok(log_w
            .iter()
            .zip(&self.labels)
            .map(|(lw, l)| label_ll[*l] + lw - label_mass[*l].ln())
            .collect())
    }

    /// Per-component responsibility log-likelihoods (without weights) and
    /// posterior means.
    fn component_terms(&self, schedule: &NoiseSchedule, z_t: &[f64], t: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let ab = schedule.alpha_bar(t);
        let sa = ab.sqrt();
        let mut lls = Vec::with_capacity(self.components());
        let mut pms = Vec::with_capacity(self.components());
        for (mu, var) in self.means.iter().zip(&self.variances) {
            let mut ll = 0.0;
            let mut pm = Vec::with_capacity(mu.len());
            for ((z, m), v) in z_t.iter().zip(mu).zip(var) {
                let tot = ab * v + (1.0 - ab);
                let diff = z - sa * m;
                ll -= 0.5 * (diff * diff / tot + tot.ln());
                pm.push(m + sa * v / tot * diff);
            }
            lls.push(ll);
            pms.push(pm);
        }
        (lls, pms)
    }

    fn combine(lls: &[f64], pms: &[Vec<f64>], log_weights: &[f64]) -> Vec<f64> {
        let scores: Vec<f64> = lls.iter().zip(log_weights).map(|(l, w)| l + w).collect();
        let norm = log_sum_exp(&scores);
        let mut out = vec![0.0; pms[0].len()];
        for (s, pm) in scores.iter().zip(pms) {
            let r = (s - norm).exp();
            if r > 0.0 {
                for (o, p) in out.iter_mut().zip(pm) {
                    *o += r * p;
                }
            }
        }
        out
    }

    /// Exact `E[z0 | z_t]` under the mixture, with components reweighted by
    /// `log_weights` (defaults to the prior weights).
    pub fn posterior_mean(
        &self,
        schedule: &NoiseSchedule,
        z_t: &[f64],
        t: usize,
        log_weights: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        if t == 0 || t > schedule.steps() {
            return Err(Error::Contract(format!("step {t} outside 1..={}", schedule.steps())));
        }
        check_len("posterior_mean z_t", self.dim(), z_t.len())?;
        let prior_lw;
        let lw = match log_weights {
            Some(lw) => {
                check_len("posterior_mean log weights", self.components(), lw.len())?;
                lw
            }
            None => {
                prior_lw = self.component_log_weights(&Condition::null())?;
                &prior_lw
            }
        };
        if lw.iter().all(|w| *w == f64::NEG_INFINITY) {
            return Err(Error::Contract("every component has zero weight".into()));
        }
        let (lls, pms) = self.component_terms(schedule, z_t, t);
        Ok(Self::combine(&lls, &pms, lw))
    }

    fn eps_from_mean(schedule: &NoiseSchedule, z_t: &[f64], t: usize, x0: &[f64]) -> Vec<f64> {
        schedule.noise_from_z0(z_t, x0, t)
    }

    /// Fits one diagonal Gaussian per label from labelled samples, with a
    /// variance floor.
    pub fn fit_labeled(samples: &[(usize, Vec<f64>)], n_labels: usize, var_floor: f64) -> Result<Self> {
        if samples.is_empty() || n_labels == 0 {
            return Err(Error::Config("fit_labeled needs samples and labels".into()));
        }
        let d = samples[0].1.len();
        let mut sums = vec![vec![0.0; d]; n_labels];
        let mut sq = vec![vec![0.0; d]; n_labels];
        let mut counts = vec![0usize; n_labels];
        for (l, z) in samples {
            if *l >= n_labels {
                return Err(Error::Config(format!("label {l} out of range")));
            }
            check_len("fit_labeled sample", d, z.len())?;
            counts[*l] += 1;
            for j in 0..d {
                sums[*l][j] += z[j];
                sq[*l][j] += z[j] * z[j];
            }
        }
        if let Some(l) = counts.iter().position(|c| *c < 2) {
            return Err(Error::Config(format!("label {l} has fewer than 2 samples")));
        }
        let n = samples.len() as f64;
        let mut means = Vec::with_capacity(n_labels);
        let mut vars = Vec::with_capacity(n_labels);
        for l in 0..n_labels {
            let c = counts[l] as f64;
            let m: Vec<f64> = sums[l].iter().map(|s| s / c).collect();
            let v = sq[l]
                .iter()
                .zip(&m)
                .map(|(s, m)| ((s - c * m * m) / (c - 1.0)).max(var_floor))
                .collect();
            means.push(m);
            vars.push(v);
        }
        let mut weights: Vec<f64> = counts.iter().map(|c| *c as f64 / n).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Self::new(weights, means, vars)
    }
}

impl NoiseModel for GaussianMixturePrior {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn predict(&self, schedule: &NoiseSchedule, z_t: &[f64], t: usize, cond: &Condition) -> Result<Vec<f64>> {
        let lw = self.component_log_weights(cond)?;
        let x0 = self.posterior_mean(schedule, z_t, t, Some(&lw))?;
        Ok(Self::eps_from_mean(schedule, z_t, t, &x0))
    }

    fn predict_pair(
        &self,
        schedule: &NoiseSchedule,
        z_t: &[f64],
        t: usize,
        cond: &Condition,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("predict z_t", self.dim(), z_t.len())?;
        let lw_u = self.component_log_weights(&Condition::null())?;
        let lw_c = self.component_log_weights(cond)?;
        let (lls, pms) = self.component_terms(schedule, z_t, t);
        let u = Self::combine(&lls, &pms, &lw_u);
        let c = Self::combine(&lls, &pms, &lw_c);
        Ok((
            Self::eps_from_mean(schedule, z_t, t, &u),
            Self::eps_from_mean(schedule, z_t, t, &c),
        ))
    }
}

const MODEL_MAGIC: &[u8; 8] = b"SEMCOMTD";
const MODEL_VERSION: u32 = 1;

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    /// Probability of training a sample unconditionally.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            learning_rate: 2e-3,
            epochs: 60,
            batch_size: 64,
            steps_per_epoch: 50,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

/// One supervised example: predict `eps` from `(z_t, t, cond)`.
#[derive(Debug, Clone)]
pub struct Example {
    pub z_t: Vec<f64>,
    pub t: usize,
    pub cond: Condition,
    pub eps: Vec<f64>,
}

/// A clean training sample with its optional condition embedding.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub z0: Vec<f64>,
    pub cond: Option<Vec<f64>>,
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub heldout_losses: Vec<f64>,
    pub final_loss: f64,
}

/// `eps = W2 tanh(W1 x + b1) + b2` with
/// `x = [z_t, t/T, sqrt(ab), sqrt(1-ab), cond, cond_flag]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyDenoiser {
    dim: usize,
    cond_dim: usize,
    hidden: usize,
    /// W1 (hidden x input, row-major), b1, W2 (dim x hidden), b2.
    params: Vec<f64>,
}

struct Cache {
    x: Vec<f64>,
    h: Vec<f64>,
    out: Vec<f64>,
}

impl TinyDenoiser {
    pub fn new<R: Rng + ?Sized>(dim: usize, cond_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        let mut model = Self {
            dim,
            cond_dim,
            hidden,
            params: vec![0.0; Self::param_count_for(dim, cond_dim, hidden)],
        };
        let n_in = model.input_dim();
        let s1 = (1.0 / n_in as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        let (w1, rest) = model.params.split_at_mut(hidden * n_in);
        let (_, rest) = rest.split_at_mut(hidden);
        let (w2, _) = rest.split_at_mut(dim * hidden);
        for w in w1 {
            let n: f64 = rng.sample(StandardNormal);
            *w = s1 * n;
        }
        for w in w2 {
            let n: f64 = rng.sample(StandardNormal);
            *w = s2 * n;
        }
        Ok(model)
    }

    fn param_count_for(dim: usize, cond_dim: usize, hidden: usize) -> usize {
        let n_in = dim + 3 + cond_dim + 1;
        hidden * n_in + hidden + dim * hidden + dim
    }

    pub fn input_dim(&self) -> usize {
        self.dim + 3 + self.cond_dim + 1
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        check_len("denoiser parameters", self.params.len(), params.len())?;
        self.params = params;
        Ok(())
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input_dim();
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.dim * self.hidden;
        (b1, w2, b2)
    }

    fn input(&self, schedule: &NoiseSchedule, z_t: &[f64], t: usize, cond: &Condition) -> Result<Vec<f64>> {
        check_len("denoiser z_t", self.dim, z_t.len())?;
        let ab = schedule.alpha_bar(t);
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(z_t);
        x.push(t as f64 / schedule.steps() as f64);
        x.push(ab.sqrt());
        x.push((1.0 - ab).sqrt());
        if cond.null || self.cond_dim == 0 {
            x.extend(std::iter::repeat_n(0.0, self.cond_dim + 1));
        } else {
            check_len("denoiser condition", self.cond_dim, cond.embedding.len())?;
            x.extend_from_slice(&cond.embedding);
            x.push(1.0);
        }
        Ok(x)
    }

    fn forward(&self, x: Vec<f64>) -> Cache {
        let n_in = self.input_dim();
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let h: Vec<f64> = (0..self.hidden)
            .map(|i| {
                let row = &p[i * n_in..(i + 1) * n_in];
                let a: f64 = row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + p[b1 + i];
                a.tanh()
            })
            .collect();
        let out = (0..self.dim)
            .map(|j| {
                let row = &p[w2 + j * self.hidden..w2 + (j + 1) * self.hidden];
                row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + p[b2 + j]
            })
            .collect();
        Cache { x, h, out }
    }

    /// Mean squared error over examples and coordinates.
    pub fn loss(&self, schedule: &NoiseSchedule, batch: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        for ex in batch {
            check_len("example eps", self.dim, ex.eps.len())?;
            let c = self.forward(self.input(schedule, &ex.z_t, ex.t, &ex.cond)?);
            total += c.out.iter().zip(&ex.eps).map(|(o, e)| (o - e).powi(2)).sum::<f64>();
        }
        Ok(total / (batch.len() * self.dim) as f64)
    }

    /// Loss and its gradient with respect to the flat parameter vector.
    pub fn loss_and_grad(&self, schedule: &NoiseSchedule, batch: &[Example]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let n_in = self.input_dim();
        let (b1, w2, b2) = self.offsets();
        let scale = 2.0 / (batch.len() * self.dim) as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        let mut g_h = vec![0.0; self.hidden];
        for ex in batch {
            check_len("example eps", self.dim, ex.eps.len())?;
            let c = self.forward(self.input(schedule, &ex.z_t, ex.t, &ex.cond)?);
            g_h.iter_mut().for_each(|g| *g = 0.0);
            for j in 0..self.dim {
                let r = c.out[j] - ex.eps[j];
                total += r * r;
                let g = scale * r;
                grad[b2 + j] += g;
                let row = w2 + j * self.hidden;
                for i in 0..self.hidden {
                    grad[row + i] += g * c.h[i];
                    g_h[i] += g * self.params[row + i];
                }
            }
            for i in 0..self.hidden {
                let g_a = g_h[i] * (1.0 - c.h[i] * c.h[i]);
                grad[b1 + i] += g_a;
                let row = &mut grad[i * n_in..(i + 1) * n_in];
                for (g, x) in row.iter_mut().zip(&c.x) {
                    *g += g_a * x;
                }
            }
        }
        Ok((total / (batch.len() * self.dim) as f64, grad))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        for v in [self.dim, self.cond_dim, self.hidden] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::ModelFormat {
            path: path.to_path_buf(),
            detail,
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut u32_buf = [0u8; 4];
        let mut next_u32 = |r: &mut BufReader<File>| -> Result<u32> {
            r.read_exact(&mut u32_buf)?;
            Ok(u32::from_le_bytes(u32_buf))
        };
        let version = next_u32(&mut r)?;
        if version != MODEL_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dim = next_u32(&mut r)? as usize;
        let cond_dim = next_u32(&mut r)? as usize;
        let hidden = next_u32(&mut r)? as usize;
        let mut u64_buf = [0u8; 8];
        r.read_exact(&mut u64_buf)?;
        let count = u64::from_le_bytes(u64_buf) as usize;
        if dim == 0 || hidden == 0 || count != Self::param_count_for(dim, cond_dim, hidden) {
            return Err(bad(format!(
                "parameter count {count} does not match dim {dim}, cond_dim {cond_dim}, hidden {hidden}"
            )));
        }
        let mut params = Vec::with_capacity(count);
        let mut f = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut f)?;
            params.push(f64::from_le_bytes(f));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(bad("trailing bytes".into()));
        }
        Ok(Self {
            dim,
            cond_dim,
            hidden,
            params,
        })
    }
}

impl NoiseModel for TinyDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, schedule: &NoiseSchedule, z_t: &[f64], t: usize, cond: &Condition) -> Result<Vec<f64>> {
        if t == 0 || t > schedule.steps() {
            return Err(Error::Contract(format!("step {t} outside 1..={}", schedule.steps())));
        }
        Ok(self.forward(self.input(schedule, z_t, t, cond)?).out)
    }
}

fn draw_examples<R: Rng + ?Sized>(
    data: &[TrainingSample],
    schedule: &NoiseSchedule,
    n: usize,
    cond_dropout: f64,
    rng: &mut R,
) -> Result<Vec<Example>> {
    (0..n)
        .map(|_| {
            let s = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(1..=schedule.steps());
            let eps: Vec<f64> = (0..s.z0.len()).map(|_| rng.sample(StandardNormal)).collect();
            let z_t = schedule.forward_marginal(&s.z0, t, &eps)?;
            let drop = rng.random::<f64>() < cond_dropout;
            let cond = match &s.cond {
                Some(c) if !drop => Condition::new(c.clone())?,
                _ => Condition::null(),
            };
            Ok(Example { z_t, t, cond, eps })
        })
        .collect()
}

/// Trains a [`TinyDenoiser`] with Adam on random `(z0, t, eps)` draws.
pub fn train_tiny_denoiser(
    data: &[TrainingSample],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(TinyDenoiser, TrainReport)> {
    let first = data
        .first()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    let dim = first.z0.len();
    let cond_dim = first.cond.as_ref().map_or(0, Vec::len);
    for s in data {
        check_len("training sample", dim, s.z0.len())?;
        check_len("training condition", cond_dim, s.cond.as_ref().map_or(cond_dim, Vec::len))?;
    }
    if cfg.batch_size == 0 || cfg.steps_per_epoch == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch_size, steps_per_epoch and learning_rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TinyDenoiser::new(dim, cond_dim, cfg.hidden, &mut rng)?;
    let mut held_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_4e1d);
    let heldout = draw_examples(data, schedule, 4 * cfg.batch_size, cfg.cond_dropout, &mut held_rng)?;

    let initial = model.loss(schedule, &heldout)?;
    let (beta1, beta2, adam_eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; model.params.len()];
    let mut v = vec![0.0; model.params.len()];
    let mut step = 0i32;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut heldout_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let batch = draw_examples(data, schedule, cfg.batch_size, cfg.cond_dropout, &mut rng)?;
            let (loss, grad) = model.loss_and_grad(schedule, &batch)?;
            acc += loss;
            step += 1;
            let c1 = 1.0 - beta1.powi(step);
            let c2 = 1.0 - beta2.powi(step);
            for (((p, g), m), v) in model.params.iter_mut().zip(&grad).zip(&mut m).zip(&mut v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + adam_eps);
            }
        }
        let held = model.loss(schedule, &heldout)?;
        if !held.is_finite() || held > 10.0 * initial {
            return Err(Error::Training {
                epoch,
                loss: held,
                initial,
            });
        }
        epoch_losses.push(acc / cfg.steps_per_epoch as f64);
        heldout_losses.push(held);
    }
    let final_loss = heldout_losses.last().copied().unwrap_or(initial);
    Ok((
        model,
        TrainReport {
            epoch_losses,
            heldout_losses,
            final_loss,
        },
    ))
}
