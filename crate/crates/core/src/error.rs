use std::path::PathBuf;

use crate::explain::CamMap;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate class {class}: averaged embedding is the zero vector")]
    DegenerateClass { class: usize },

    /// The class score is too close to zero to normalise the ablation drops.
    /// Carries the unweighted `ReLU(sum_k A^k)` map instead.
    #[error("degenerate class score {score:e}; unweighted map returned")]
    DegenerateScore { score: f32, fallback: Box<CamMap> },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Training { epoch: usize, loss: f32 },

    #[error("undefined improvement ratio: ours mean dloss {ours} (baseline {baseline})")]
    UndefinedRatio { baseline: f64, ours: f64 },

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short name used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Index(_) => "index",
            Error::Argument(_) => "argument",
            Error::Structural(_) => "structural",
            Error::Format(_) => "format",
            Error::Data(_) => "data",
            Error::DegenerateClass { .. } => "degenerate_class",
            Error::DegenerateScore { .. } => "degenerate_score",
            Error::Training { .. } => "training",
            Error::UndefinedRatio { .. } => "undefined_ratio",
            Error::Comparison(_) => "comparison",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
