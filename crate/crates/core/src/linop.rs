//! Linear degradation operators and their range/null space algebra.
//!
//! Masks are kept as index sets: `A` and `A†` are then the same diagonal 0/1
//! projector and every operation is O(d) and exact. Dense operators carry a
//! pseudo-inverse computed once from an SVD.

use nalgebra::DMatrix;

use crate::{check_len, Error, Result};

/// Relative cutoff below which singular values are treated as zero.
pub const PINV_RCOND: f64 = 1e-12;
const PENROSE_TOL: f64 = 1e-10;

/// Coordinate erasure over a `dim`-dimensional latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    kept: Vec<bool>,
}

impl Mask {
    pub fn from_kept(dim: usize, kept_indices: &[usize]) -> Result<Self> {
        let mut kept = vec![false; dim];
        for &i in kept_indices {
            if i >= dim {
                return Err(Error::Config(format!("kept index {i} out of range for dim {dim}")));
            }
            kept[i] = true;
        }
        Ok(Self { kept })
    }

    /// Keeps everything except `[start, start + len)`.
    pub fn drop_segment(dim: usize, start: usize, len: usize) -> Result<Self> {
        if start + len > dim {
            return Err(Error::Config(format!(
                "segment [{start}, {}) exceeds dim {dim}",
                start + len
            )));
        }
        let kept = (0..dim).map(|i| i < start || i >= start + len).collect();
        Ok(Self { kept })
    }

    pub fn dim(&self) -> usize {
        self.kept.len()
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.kept[i]
    }

    pub fn kept_flags(&self) -> &[bool] {
        &self.kept
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|k| **k).count()
    }
}

/// Dense `m x d` operator with its Moore-Penrose pseudo-inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    matrix: DMatrix<f64>,
    pinv: DMatrix<f64>,
}

impl Dense {
    /// Row-major `rows x cols` data.
    pub fn new(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        check_len("dense operator data", rows * cols, data.len())?;
        if rows == 0 || cols == 0 {
            return Err(Error::Config("dense operator must be non-empty".into()));
        }
        let matrix = DMatrix::from_row_slice(rows, cols, data);
        let pinv = pseudo_inverse(&matrix)?;
        let scale_a = matrix.amax().max(1.0);
        let scale_p = pinv.amax().max(1.0);
        let e1 = (&matrix * &pinv * &matrix - &matrix).amax();
        let e2 = (&pinv * &matrix * &pinv - &pinv).amax();
        if e1 > PENROSE_TOL * scale_a || e2 > PENROSE_TOL * scale_p {
            return Err(Error::Config(format!(
                "pseudo-inverse fails Penrose identities (|AA+A-A|={e1:.2e}, |A+AA+-A+|={e2:.2e})"
            )));
        }
        Ok(Self { matrix, pinv })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn pinv(&self) -> &DMatrix<f64> {
        &self.pinv
    }
}

fn pseudo_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = PINV_RCOND * smax;
    let u = svd
        .u
        .as_ref()
        .ok_or_else(|| Error::Config("SVD did not produce U".into()))?;
    let v_t = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::Config("SVD did not produce V^T".into()))?;
    let mut s_inv = DMatrix::zeros(v_t.nrows(), u.ncols());
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > cutoff {
            s_inv[(i, i)] = 1.0 / s;
        }
    }
    Ok(v_t.transpose() * s_inv * u.transpose())
}

/// The linear corruption `A` in `y = A z + n`.
#[derive(Debug, Clone, PartialEq)]
pub enum DegradationOperator {
    Identity { dim: usize },
    Mask(Mask),
    Dense(Dense),
}

impl DegradationOperator {
    pub fn identity(dim: usize) -> Self {
        Self::Identity { dim }
    }

    pub fn mask(mask: Mask) -> Self {
        Self::Mask(mask)
    }

    /// Contiguous erasure of `[start, start + len)`.
    pub fn segment_mask(dim: usize, start: usize, len: usize) -> Result<Self> {
        Ok(Self::Mask(Mask::drop_segment(dim, start, len)?))
    }

    pub fn dense(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Ok(Self::Dense(Dense::new(rows, cols, data)?))
    }

    pub fn dim_in(&self) -> usize {
        match self {
            Self::Identity { dim } => *dim,
            Self::Mask(m) => m.dim(),
            Self::Dense(d) => d.matrix.ncols(),
        }
    }

    /// Masks keep the full length; dropped coordinates read as zero.
    pub fn dim_out(&self) -> usize {
        match self {
            Self::Identity { dim } => *dim,
            Self::Mask(m) => m.dim(),
            Self::Dense(d) => d.matrix.nrows(),
        }
    }

    /// Whether `y[i]` carries signal; `None` for dense operators.
    pub fn observed_flags(&self) -> Option<Vec<bool>> {
        match self {
            Self::Identity { dim } => Some(vec![true; *dim]),
            Self::Mask(m) => Some(m.kept.clone()),
            Self::Dense(_) => None,
        }
    }

    /// `A z`.
    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("apply", self.dim_in(), z.len())?;
        Ok(match self {
            Self::Identity { .. } => z.to_vec(),
            Self::Mask(m) => project(m, z),
            Self::Dense(d) => mat_vec(&d.matrix, z),
        })
    }

    /// `A† y`.
    pub fn pinv_apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("pinv_apply", self.dim_out(), y.len())?;
        Ok(match self {
            Self::Identity { .. } => y.to_vec(),
            Self::Mask(m) => project(m, y),
            Self::Dense(d) => mat_vec(&d.pinv, y),
        })
    }

    /// `A† A z`.
    pub fn range_project(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("range_project", self.dim_in(), z.len())?;
        Ok(match self {
            Self::Identity { .. } => z.to_vec(),
            Self::Mask(m) => project(m, z),
            Self::Dense(d) => mat_vec(&d.pinv, &mat_vec(&d.matrix, z)),
        })
    }

    /// `(A† A z, (I - A† A) z)`.
    pub fn decompose(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let range = self.range_project(z)?;
        let null = match self {
            // exact split: each coordinate lands in exactly one part
            Self::Mask(m) => z
                .iter()
                .zip(&m.kept)
                .map(|(v, k)| if *k { 0.0 } else { *v })
                .collect(),
            Self::Identity { .. } => vec![0.0; z.len()],
            Self::Dense(_) => z.iter().zip(&range).map(|(v, r)| v - r).collect(),
        };
        Ok((range, null))
    }

    /// `A† y + (I - A† A) z_tilde`.
    pub fn combine_solution(&self, y: &[f64], z_tilde: &[f64]) -> Result<Vec<f64>> {
        let base = self.pinv_apply(y)?;
        let (_, null) = self.decompose(z_tilde)?;
        Ok(base.iter().zip(&null).map(|(b, n)| b + n).collect())
    }

    /// `A† (A z - y)`, the range-space correction.
    pub fn range_correction(&self, z: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_len("range_correction y", self.dim_out(), y.len())?;
        let az = self.apply(z)?;
        let diff: Vec<f64> = az.iter().zip(y).map(|(a, b)| a - b).collect();
        self.pinv_apply(&diff)
    }

    /// `max_i |(A z - y)_i|`.
    pub fn residual_inf(&self, z: &[f64], y: &[f64]) -> Result<f64> {
        check_len("residual y", self.dim_out(), y.len())?;
        let az = self.apply(z)?;
        Ok(az
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

fn project(m: &Mask, v: &[f64]) -> Vec<f64> {
    v.iter()
        .zip(&m.kept)
        .map(|(x, k)| if *k { *x } else { 0.0 })
        .collect()
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}
