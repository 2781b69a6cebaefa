//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum AmclError {
    /// A tensor or image did not have the shape a contract requires.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A configuration value violates its documented invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Dataset construction or loading failed.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Filesystem failure, annotated with the offending path.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A persisted file exists but cannot be decoded.
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    /// A checkpoint disagrees with the architecture it is loaded into.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    /// Discriminator loss stayed below the divergence floor.
    #[error(
        "discriminator loss {d_loss:.3e} below 1e-6 for 3 consecutive epochs \
         (epoch {epoch}); generator has likely mode-collapsed"
    )]
    ModeCollapse { epoch: usize, d_loss: f64 },

    /// A gradient or loss left the finite range during optimization.
    #[error("non-finite {what} in {phase} phase (epoch {epoch})")]
    NonFinite {
        what: &'static str,
        phase: &'static str,
        epoch: usize,
    },

    /// A pipeline stage needs an artifact that no earlier stage produced.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// A pipeline stage failed.
    #[error("stage {stage} failed: {reason}")]
    Stage { stage: String, reason: String },
}

pub type Result<T> = std::result::Result<T, AmclError>;

impl AmclError {
    /// Wrap an `io::Error` with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AmclError::Io {
            path: path.into(),
            source,
        }
    }
}
