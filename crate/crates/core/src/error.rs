use std::io;

use crate::trainer::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("rank deficient system: pivot ratio {ratio:.3e} below tolerance {tol:.3e}")]
    RankDeficient { ratio: f64, tol: f64 },

    #[error("insufficient data: {needed} equations needed, {got} available")]
    InsufficientData { needed: usize, got: usize },

    #[error("activation with negative slope {0} has no inverse")]
    NonInvertibleActivation(f64),

    #[error("latent system is underdetermined: {equations} equations for {unknowns} unknowns")]
    DeterminednessViolation { equations: usize, unknowns: usize },

    #[error("invalid architecture: {}", format_violations(.0))]
    InvalidArchitecture(Vec<Violation>),

    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },

    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable identifier used in machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonFinite { .. } => "NonFinite",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::InsufficientData { .. } => "InsufficientData",
            Error::NonInvertibleActivation(_) => "NonInvertibleActivation",
            Error::DeterminednessViolation { .. } => "DeterminednessViolation",
            Error::InvalidArchitecture(_) => "InvalidArchitecture",
            Error::BadMagic { .. } => "BadMagic",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::TruncatedFile(_) => "TruncatedFile",
            Error::Config(_) => "Config",
            Error::Io(_) => "Io",
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::ShapeMismatch(msg.into()))
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
