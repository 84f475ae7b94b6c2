use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quadrature construction failed for D={ambient_dim}, n={n_nodes}: {detail}")]
    Quadrature {
        ambient_dim: usize,
        n_nodes: usize,
        detail: String,
    },

    #[error("non-finite shape function value {value} at t={t}")]
    InvalidShape { t: f64, value: f64 },

    #[error(
        "degenerate fundamental system at level {level} on S^{} (D={ambient_dim}): reached {achieved} of {required} directions",
        ambient_dim - 1
    )]
    DegenerateSystem {
        level: usize,
        ambient_dim: usize,
        achieved: usize,
        required: usize,
    },

    #[error("kernel spectrum is zero at every level up to L={0}")]
    DegenerateSpectrum(usize),

    #[error("{what} is not positive definite after maximum jitter (condition estimate {condition:.3e})")]
    Conditioning { what: String, condition: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: row {row}, column {column}: {detail}")]
    Parse {
        path: String,
        row: usize,
        column: usize,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by floating-point breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Quadrature { .. }
                | Error::InvalidShape { .. }
                | Error::DegenerateSystem { .. }
                | Error::DegenerateSpectrum(_)
                | Error::Conditioning { .. }
                | Error::NonFinite(_)
                | Error::Evaluation(_)
        )
    }
}
