use std::path::PathBuf;

/// Errors produced by the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Vector or matrix dimensions do not agree.
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// The blind noise estimator cannot run on the given input.
    #[error("noise estimation failed: {0}")]
    Estimation(String),
    /// A numerical invariant failed at run time.
    #[error("invariant violated at step {step}: {detail}")]
    Invariant { step: usize, detail: String },
    /// The reverse process produced a non-finite state.
    #[error("sampler diverged at step {step}")]
    Divergence { step: usize },
    /// Denoiser training blew up.
    #[error("training diverged at epoch {epoch}: loss {loss:.4e} exceeds 10x initial {initial:.4e}")]
    Training { epoch: usize, loss: f64, initial: f64 },
    #[error("model file {path}: {detail}")]
    ModelFormat { path: PathBuf, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            found,
        })
    }
}
