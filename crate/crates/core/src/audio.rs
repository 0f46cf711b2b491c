//! Synthetic harmonic tones and an orthonormal DCT frame codec.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{check_len, Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
const PEAK: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToneSpec {
    pub f0: f64,
    pub amplitudes: Vec<f64>,
    pub duration: f64,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
}

fn default_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}

impl ToneSpec {
    pub fn harmonics(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f0 > 0.0 && self.f0.is_finite()) {
            return Err(Error::Config(format!("f0 must be positive, got {}", self.f0)));
        }
        if self.amplitudes.is_empty() {
            return Err(Error::Config("tone needs at least one harmonic".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.f0 * self.harmonics() as f64 >= nyquist {
            return Err(Error::Config(format!(
                "harmonic {} of {} Hz aliases above {nyquist} Hz",
                self.harmonics(),
                self.f0
            )));
        }
        if !(self.duration > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config("duration and sample rate must be positive".into()));
        }
        Ok(())
    }
}

/// Harmonic sum with random phases, peak-normalised to 0.9.
pub fn synth<R: Rng + ?Sized>(spec: &ToneSpec, rng: &mut R) -> Result<Vec<f64>> {
    spec.validate()?;
    let phases: Vec<f64> = (0..spec.harmonics())
        .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
        .collect();
    let rate = spec.sample_rate as f64;
    let mut w: Vec<f64> = (0..spec.samples())
        .map(|n| {
            let t = n as f64 / rate;
            spec.amplitudes
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (a, p))| a * (std::f64::consts::TAU * spec.f0 * (h + 1) as f64 * t + p).sin())
                .sum()
        })
        .collect();
    let peak = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = PEAK / peak;
        w.iter_mut().for_each(|v| *v *= g);
    }
    Ok(w)
}

/// Frame codec keeping the `r` lowest DCT-II coefficients of each
/// `n`-sample frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCodec {
    n: usize,
    r: usize,
    /// `n x n` row-major orthonormal basis; row `k` is frequency `k`.
    basis: Vec<f64>,
}

impl FrameCodec {
    pub fn new(n: usize, r: usize) -> Result<Self> {
        if n == 0 || r == 0 || r > n {
            return Err(Error::Config(format!("codec needs 0 < r <= n, got n={n}, r={r}")));
        }
        let mut basis = vec![0.0; n * n];
        let nf = n as f64;
        for k in 0..n {
            let s = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            for i in 0..n {
                basis[k * n + i] = s * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / nf).cos();
            }
        }
        Ok(Self { n, r, basis })
    }

    pub fn frame_len(&self) -> usize {
        self.n
    }

    pub fn retained(&self) -> usize {
        self.r
    }

    pub fn basis_row(&self, k: usize) -> &[f64] {
        &self.basis[k * self.n..(k + 1) * self.n]
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        samples.div_ceil(self.n)
    }

    /// Frame-major latent of `frames * r` coefficients; the tail frame is
    /// zero-padded.
    pub fn encode(&self, waveform: &[f64]) -> Vec<f64> {
        let frames = self.frames_for(waveform.len());
        let mut out = Vec::with_capacity(frames * self.r);
        let mut frame = vec![0.0; self.n];
        for f in 0..frames {
            let chunk = &waveform[f * self.n..((f + 1) * self.n).min(waveform.len())];
            frame.iter_mut().for_each(|v| *v = 0.0);
            frame[..chunk.len()].copy_from_slice(chunk);
            for k in 0..self.r {
                out.push(self.basis_row(k).iter().zip(&frame).map(|(b, x)| b * x).sum());
            }
        }
        out
    }

    /// Inverse of [`encode`](Self::encode) with dropped coefficients set to
    /// zero. Returns `frames * n` samples.
    pub fn decode(&self, latent: &[f64]) -> Result<Vec<f64>> {
        if !latent.len().is_multiple_of(self.r) {
            return Err(Error::Shape {
                context: "codec latent",
                expected: latent.len().div_ceil(self.r) * self.r,
                found: latent.len(),
            });
        }
        let mut out = vec![0.0; latent.len() / self.r * self.n];
        for (f, coefs) in latent.chunks(self.r).enumerate() {
            let frame = &mut out[f * self.n..(f + 1) * self.n];
            for (k, c) in coefs.iter().enumerate() {
                for (o, b) in frame.iter_mut().zip(self.basis_row(k)) {
                    *o += c * b;
                }
            }
        }
        Ok(out)
    }
}

/// Codec frames covering `[start_s, start_s + len_s)` of a clip.
pub fn frames_for_time(start_s: f64, len_s: f64, sample_rate: u32, frame_len: usize) -> Range<usize> {
    let per_frame = frame_len as f64 / sample_rate as f64;
    let start = (start_s / per_frame).round() as usize;
    let end = ((start_s + len_s) / per_frame).round() as usize;
    start..end
}

/// Writes a mono 32-bit float WAV.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for s in samples {
        w.write_sample(*s as f32)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut r = hound::WavReader::open(path)?;
    let rate = r.spec().sample_rate;
    let samples = r
        .samples::<f32>()
        .map(|s| s.map(f64::from))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((samples, rate))
}

/// Writes a frame-major latent as CSV, one frame per row.
pub fn write_latent_csv(path: &Path, latent: &[f64], frame_len: usize) -> Result<()> {
    if frame_len == 0 {
        return Err(Error::Config("frame_len must be positive".into()));
    }
    check_len("latent csv", latent.len().div_ceil(frame_len) * frame_len, latent.len())?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in latent.chunks(frame_len) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tone(amplitudes: Vec<f64>) -> ToneSpec {
        ToneSpec {
            f0: 440.0,
            amplitudes,
            duration: 1.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }

    #[test]
    fn synth_length_and_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = synth(&tone(vec![1.0, 0.5]), &mut rng).unwrap();
        assert_eq!(w.len(), 16_000);
        let peak = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.9).abs() < 1e-9);
    }

    #[test]
    fn zero_amplitudes_give_silence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = synth(&tone(vec![0.0, 0.0]), &mut rng).unwrap();
        assert!(w.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn aliasing_rejected() {
        let mut spec = tone(vec![1.0; 20]);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        spec.amplitudes.truncate(18);
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn full_codec_round_trip() {
        let codec = FrameCodec::new(16, 16).unwrap();
        let w: Vec<f64> = (0..48).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let back = codec.decode(&codec.encode(&w)).unwrap();
        let err = w.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10);
    }

    #[test]
    fn constant_lives_in_dc() {
        let codec = FrameCodec::new(8, 1).unwrap();
        let w = vec![0.7; 16];
        let latent = codec.encode(&w);
        assert_eq!(latent.len(), 2);
        let back = codec.decode(&latent).unwrap();
        assert!(back.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn padding_and_shapes() {
        let codec = FrameCodec::new(4, 2).unwrap();
        assert_eq!(codec.encode(&[1.0; 5]).len(), 4);
        assert!(codec.decode(&[1.0; 3]).is_err());
        assert!(FrameCodec::new(4, 5).is_err());
    }

    #[test]
    fn ten_percent_of_ten_seconds() {
        let r = frames_for_time(4.0, 1.0, 16_000, 64);
        assert_eq!(r.len(), 250);
        assert_eq!(r.start, 1000);
        assert_eq!(frames_for_time(0.0, 10.0, 16_000, 64), 0..2500);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        write_wav(&path, &[0.0, 0.5, -0.25], 16_000).unwrap();
        let (s, rate) = read_wav(&path).unwrap();
        assert_eq!(rate, 16_000);
        assert_eq!(s, vec![0.0, 0.5, -0.25]);
    }
}
