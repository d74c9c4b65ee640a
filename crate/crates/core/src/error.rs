use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("backward already ran on this graph; rebuild it with a fresh forward pass")]
    GraphConsumed,

    #[error("gradient oracle: {0}")]
    Oracle(String),

    #[error("input too short: {frames} frames but window length is {window}")]
    InputTooShort { frames: usize, window: usize },

    #[error("region {region} has zero variance in window {window}")]
    DegenerateRegion { region: usize, window: usize },

    #[error("tumor mask index {index} out of range for {regions} regions")]
    Mask { index: usize, regions: usize },

    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),

    #[error("label error: {0}")]
    Label(String),

    #[error("no task carries supervision for this patient")]
    EmptySupervision,

    #[error("non-finite gradient in parameter `{0}`")]
    Divergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by bad inputs or configuration rather than by
    /// the numerics of a run.
    pub fn is_usage(&self) -> bool {
        !matches!(
            self,
            Error::Divergence(_)
                | Error::Oracle(_)
                | Error::DegenerateRegion { .. }
                | Error::GraphConsumed
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
