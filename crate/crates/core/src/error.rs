use thiserror::Error;

pub type Result<T> = std::result::Result<T, BeaconError>;

#[derive(Debug, Error)]
pub enum BeaconError {
    #[error("failed to parse config: {0}")]
    ConfigParse(String),

    #[error("config field `{field}` out of range: {reason}")]
    OutOfRange { field: &'static str, reason: String },

    #[error("unknown hyperparameter field `{0}`")]
    UnknownField(String),

    #[error("infeasible box-and-sum constraint: {0}")]
    Infeasible(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("k-NN discrepancy needs at least 2 target samples, got {0}")]
    TooFewTargets(usize),

    #[error("target embeddings have zero within-target spread")]
    DegenerateSpread,

    #[error("closed-form q-solve requires lambda2 > 0")]
    ZeroLambda2,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl BeaconError {
    /// True for errors that come from a bad configuration rather than a runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            BeaconError::ConfigParse(_) | BeaconError::OutOfRange { .. } | BeaconError::UnknownField(_)
        )
    }
}
