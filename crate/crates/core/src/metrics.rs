//! SNR, Gaussian feature statistics and the Fréchet distance between them.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::{check_len, Error, Result};

/// Reported when the residual is numerically zero.
pub const SNR_CAP_DB: f64 = 120.0;
const SYM_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;
const FD_CLAMP: f64 = 1e-8;

/// `10 log10(|ref|^2 / |ref - est|^2)`, capped at [`SNR_CAP_DB`].
pub fn snr_db(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_len("snr estimate", reference.len(), estimate.len())?;
    let power: f64 = reference.iter().map(|r| r * r).sum();
    if power == 0.0 {
        return Err(Error::Contract("snr of an all-zero reference".into()));
    }
    let residual: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| (r - e).powi(2))
        .sum();
    if residual == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (power / residual).log10()).min(SNR_CAP_DB))
}

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub n: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Validates symmetry and positive semi-definiteness.
    pub fn new(n: usize, mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Shape {
                context: "covariance",
                expected: d * d,
                found: cov.nrows() * cov.ncols(),
            });
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > SYM_TOL * scale {
            return Err(Error::Contract("covariance is not symmetric".into()));
        }
        let min_eig = cov.clone().symmetric_eigenvalues().min();
        if d > 0 && min_eig < -PSD_TOL * scale {
            return Err(Error::Contract(format!("covariance has eigenvalue {min_eig:e} < 0")));
        }
        Ok(Self {
            n,
            mean: DVector::from_vec(mean),
            cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance, projected onto the PSD cone.
pub fn fit_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Contract(format!("fit_stats needs at least 2 vectors, got {n}")));
    }
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    for f in features {
        check_len("feature vector", d, f.len())?;
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for f in features {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += di * (f[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let cov = psd_project(cov);
    GaussianStats::new(n, mean, cov)
}

fn psd_project(cov: DMatrix<f64>) -> DMatrix<f64> {
    let eig = cov.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|v| *v >= 0.0) {
        return cov;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let m = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (&m + m.transpose()) * 0.5
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    check_len("frechet dims", a.dim(), b.dim())?;
    let mean_term = (&a.mean - &b.mean).norm_squared();
    // tr (S_a^{1/2} S_b S_a^{1/2})^{1/2} is the nuclear norm of S_a^{1/2} S_b^{1/2};
    // singular values keep small eigenvalues that squaring would lose
    let m = sqrt_psd(&a.cov) * sqrt_psd(&b.cov);
    let cross: f64 = m.singular_values().iter().sum();
    let fd = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if fd >= 0.0 {
        Ok(fd)
    } else if fd >= -FD_CLAMP * (1.0 + a.cov.trace() + b.cov.trace()) {
        Ok(0.0)
    } else {
        Err(Error::Contract(format!("Fréchet distance came out negative ({fd:e})")))
    }
}

/// Frames `frames` of a frame-major signal, each `frame_len` long.
pub fn region_features(signal: &[f64], frames: Range<usize>, frame_len: usize) -> Result<Vec<Vec<f64>>> {
    if frames.is_empty() {
        return Err(Error::Contract("empty feature region".into()));
    }
    if frame_len == 0 || frames.end * frame_len > signal.len() {
        return Err(Error::Contract(format!(
            "region {frames:?} of {frame_len}-long frames exceeds signal of length {}",
            signal.len()
        )));
    }
    Ok(frames
        .map(|f| signal[f * frame_len..(f + 1) * frame_len].to_vec())
        .collect())
}

/// All frames of a frame-major signal.
pub fn all_frames(signal: &[f64], frame_len: usize) -> Result<Vec<Vec<f64>>> {
    if frame_len == 0 {
        return Err(Error::Contract("frame_len must be positive".into()));
    }
    region_features(signal, 0..signal.len() / frame_len, frame_len)
}

/// `max |z_i - y_i|` over observed coordinates.
pub fn observed_residual(z: &[f64], y: &[f64], observed: &[bool]) -> Result<f64> {
    check_len("residual y", z.len(), y.len())?;
    check_len("residual flags", z.len(), observed.len())?;
    Ok(z.iter()
        .zip(y)
        .zip(observed)
        .filter(|(_, k)| **k)
        .map(|((a, b), _)| (a - b).abs())
        .fold(0.0, f64::max))
}
