//! Desk-scale semantic-communication link simulator.
//!
//! A transmitter sends a compact latent together with a semantic embedding
//! over a noisy, lossy channel. The receiver restores the latent with a
//! diffusion sampler built on the range-null space decomposition of the
//! degradation operator, optionally guided by the (possibly corrupted)
//! embedding.
//!
//! Module map:
//! - [`schedule`]: noise schedules, forward marginals, posterior coefficients.
//! - [`linop`]: degradation operators with pseudo-inverse and projectors.
//! - [`channel`]: PSNR-calibrated AWGN, erasure, receiver noise estimation.
//! - [`denoiser`]: analytic Gaussian-mixture oracle and a tiny trainable network.
//! - [`sampler`]: ancestral, range-null restoration and the replacement baseline.
//! - [`audio`]: harmonic tone synthesis and an orthonormal DCT frame codec.
//! - [`metrics`]: SNR, Gaussian feature statistics and Fréchet distance.
//! - [`harness`]: experiment configuration, trials, grids and persistence.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod channel;
pub mod denoiser;
mod error;
pub mod harness;
pub mod linop;
pub mod metrics;
pub mod sampler;
pub mod schedule;
pub mod selftest;

pub use error::{Error, Result};

pub(crate) use error::check_len;
