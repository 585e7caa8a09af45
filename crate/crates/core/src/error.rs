use std::path::PathBuf;

/// Errors produced by the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("binary target must be 0 or 1, got {0}")]
    InvalidTarget(f64),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("could not place {requested} nuclei with separation {separation} px (placed {placed})")]
    UnsatisfiableDensity {
        requested: usize,
        placed: usize,
        separation: f64,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: unreadable image: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("frozen encoder weights changed during training")]
    FrozenViolation,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used by command-line front ends.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidShape(_) | Error::LengthMismatch { .. } => "shape",
            Error::Usage(_) => "usage",
            Error::LabelOutOfRange { .. } | Error::InvalidTarget(_) => "label",
            Error::InvalidConfig(_) => "config",
            Error::UnsatisfiableDensity { .. } => "density",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Checkpoint(_) => "checkpoint",
            Error::EmptyDataset(_) => "dataset",
            Error::FrozenViolation => "frozen",
            Error::Diverged(_) => "diverged",
        }
    }
}
