use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),

    #[error("boundary normalization integral {0:.3e} is numerically zero")]
    DegenerateBandwidth(f64),

    #[error("fewer than {needed} observations carry kernel weight at z = {at}")]
    InsufficientLocalData { at: f64, needed: usize },

    #[error("bandwidth too small: {0}")]
    BandwidthTooSmall(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("incompatible fits: {0}")]
    IncompatibleFits(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("loss overflow at observation {index} (difference {value:.6e})")]
    LossOverflow { index: usize, value: f64 },

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("quadrature failed to converge: {0}")]
    QuadratureFailure(String),

    #[error("no admissible bandwidth candidate: {0}")]
    BandwidthGridTooSmall(String),

    #[error("bootstrap failed: {failures} of {total} replicates did not fit")]
    BootstrapFailures { failures: usize, total: usize },

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 1 for usage/input problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 1,
            _ => 2,
        }
    }
}
