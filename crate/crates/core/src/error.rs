use std::path::PathBuf;

/// Errors produced anywhere in the training and adaptation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot normalize a zero vector")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("label {label} out of range for {num_known} known classes")]
    LabelOutOfRange { label: usize, num_known: usize },
    #[error("objective is empty: both the unknown-activation and smoothed CE terms are disabled")]
    EmptyObjective,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("could not place {clusters} separated cluster centers after {retries} retries")]
    CenterPlacement { clusters: usize, retries: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("known class {0} has no training samples")]
    MissingClass(usize),
    #[error("prototype for class {0} is undefined: embeddings cancel to zero")]
    DegeneratePrototype(usize),
    #[error("neighborhood centroid is undefined: neighbor embeddings cancel to zero")]
    DegenerateCentroid,
    #[error("embedding bank is empty")]
    EmptyBank,
    #[error("K = {k} exceeds bank size {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("head row {0} is zero and cannot seed the memory bank")]
    ZeroHeadRow(usize),
    #[error("{0}")]
    Metric(String),
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("refusing to overwrite existing artifacts in {0} (pass --force)")]
    WouldOverwrite(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable snake_case tag for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ZeroNorm => "zero_norm",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidTemperature(_) => "invalid_temperature",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::EmptyObjective => "empty_objective",
            Error::InvalidConfig(_) => "invalid_config",
            Error::CenterPlacement { .. } => "center_placement",
            Error::Divergence { .. } => "divergence",
            Error::MissingClass(_) => "missing_class",
            Error::DegeneratePrototype(_) => "degenerate_prototype",
            Error::DegenerateCentroid => "degenerate_centroid",
            Error::EmptyBank => "empty_bank",
            Error::KTooLarge { .. } => "k_too_large",
            Error::ZeroHeadRow(_) => "zero_head_row",
            Error::Metric(_) => "metric",
            Error::Parse { .. } => "parse",
            Error::WouldOverwrite(_) => "would_overwrite",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
