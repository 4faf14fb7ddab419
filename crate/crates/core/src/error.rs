use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("insufficient access points: need at least {needed}, have {have}")]
    InsufficientAps { needed: usize, have: usize },

    #[error("unknown access point id {0}")]
    UnknownAp(u32),

    #[error("device index {index} out of range ({count} device positions)")]
    DeviceIndexOutOfRange { index: usize, count: usize },

    #[error("grid budget exceeded: {required} points required, {allowed} allowed")]
    GridBudgetExceeded { required: u64, allowed: u64 },

    #[error("degenerate EP state: {0}")]
    DegenerateState(String),

    #[error("cavity of site {site} is not positive definite")]
    CavityNotPositiveDefinite { site: usize },

    #[error("observation incompatible with cavity (site {site})")]
    IncompatibleObservation { site: usize },

    #[error("no calibration epoch contains the reference AP {0}")]
    MissingReference(u32),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for configuration and validation failures (CLI exit code 2).
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } => true,
            Error::Context { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
