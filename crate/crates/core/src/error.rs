use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
}

/// Container-format errors raised by the tensor store.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}, not a tensor bundle")]
    BadMagic([u8; 4]),
    #[error("bundle version {found} is newer than supported version {supported}")]
    VersionAhead { found: u32, supported: u32 },
    #[error("truncated data while reading {entry}")]
    Truncated { entry: String },
    #[error("unknown dtype code {code} for entry {entry}")]
    UnknownDtype { entry: String, code: u8 },
    #[error("duplicate tensor name {0:?}")]
    NameCollision(String),
    #[error("invalid tensor name {0:?}")]
    InvalidName(String),
    #[error("entry {name}: {reason}")]
    BadShape { name: String, reason: String },
    #[error("entry {name}: payload has {actual} bytes, shape requires {expected}")]
    LengthMismatch { name: String, expected: usize, actual: usize },
    #[error("entry {name}: payload overlaps a previous entry or the header")]
    Overlap { name: String },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("layer {layer}: missing tensor {entry}")]
    MissingTensor { layer: String, entry: String },
    #[error("layer {layer}: {reason}")]
    BadLayer { layer: String, reason: String },
    #[error("rank {rank} exceeds min(m, n) for a {m}x{n} matrix")]
    RankExceedsDimension { rank: usize, m: usize, n: usize },
    #[error("Gram matrix is not symmetric (relative asymmetry {0:.3e} > 1e-6)")]
    AsymmetricGram(f64),
    #[error("Gram matrix is not positive semi-definite (min eigenvalue {min_eig:.3e})")]
    NotPsd { min_eig: f64 },
    #[error("Cholesky factorization failed: Hessian is not positive definite; increase the damping ratio (--damp-ratio)")]
    NotPositiveDefinite,
    #[error("{0} failed to converge")]
    Decomposition(&'static str),
    #[error("report requires at least one layer")]
    EmptyReport,
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("report serialization: {0}")]
    Report(String),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidConfig(_) | Error::RankExceedsDimension { .. } => ErrorCategory::Config,
            Error::NotPositiveDefinite
            | Error::Decomposition(_)
            | Error::NotPsd { .. }
            | Error::Invariant(_) => ErrorCategory::Numerical,
            _ => ErrorCategory::Data,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Report(e.to_string())
    }
}
