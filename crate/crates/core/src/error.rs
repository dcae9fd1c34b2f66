use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged: loss is {loss} at step {step}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("singular design matrix: rank deficient at pivot column {pivot}")]
    SingularDesign { pivot: usize },

    #[error("parse error at row {row}, column {col}: {detail}")]
    Parse {
        row: usize,
        col: usize,
        detail: String,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("unsupported model format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("model file checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed model file: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numerics (divergence, NaN) rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::TrainingDiverged { .. }
        )
    }
}
