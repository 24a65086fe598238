use thiserror::Error;

pub type Result<T> = std::result::Result<T, MednError>;

#[derive(Debug, Error)]
pub enum MednError {
    #[error("unknown emotion label {label:?} for the {scheme} scheme")]
    UnknownLabel { label: String, scheme: String },

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("infeasible synthetic config: {0}")]
    InfeasibleConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite values: {0}")]
    NonFiniteValues(String),

    #[error("grid of {height}x{width} tokens is not divisible by sparsity rate {rate}")]
    IndivisibleGrid {
        height: usize,
        width: usize,
        rate: usize,
    },

    #[error("flow estimator failed on frame {frame}: {message}")]
    EstimatorFailure { frame: usize, message: String },

    #[error("non-finite loss at epoch {epoch}, step {step}: cls={cls} au={au} orth={orth}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        cls: f64,
        au: f64,
        orth: f64,
    },

    #[error("empty fold: {0}")]
    EmptyFold(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },

    #[error("fold {fold} ({subject}) failed: {source}")]
    Fold {
        fold: usize,
        subject: String,
        #[source]
        source: Box<MednError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MednError {
    /// Short machine-readable tag, used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            MednError::UnknownLabel { .. } => "UnknownLabel",
            MednError::DegenerateDataset(_) => "DegenerateDataset",
            MednError::InfeasibleConfig(_) => "InfeasibleConfig",
            MednError::ShapeMismatch(_) => "ShapeMismatch",
            MednError::NonFiniteValues(_) => "NonFiniteValues",
            MednError::IndivisibleGrid { .. } => "IndivisibleGrid",
            MednError::EstimatorFailure { .. } => "EstimatorFailure",
            MednError::NonFiniteLoss { .. } => "NonFiniteLoss",
            MednError::EmptyFold(_) => "EmptyFold",
            MednError::InvalidConfig(_) => "InvalidConfig",
            MednError::Format { .. } => "Format",
            MednError::Fold { source, .. } => source.kind(),
            MednError::Io(_) => "Io",
            MednError::Json(_) => "Json",
            MednError::Csv(_) => "Csv",
        }
    }
}
