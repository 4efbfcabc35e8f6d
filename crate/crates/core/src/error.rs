use std::path::PathBuf;

use crate::hpinv::RefinementReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("relative error undefined: reference vector has zero norm")]
    UndefinedMetric,

    #[error("cannot map an all-zero matrix onto conductances")]
    DegenerateMapping,

    #[error("analog circuit unstable: condition estimate {condition:.3e}")]
    CircuitUnstable { condition: f64 },

    #[error(
        "refinement diverged after {} iterations (residual {:.3e}, condition estimate {condition:.3e})",
        report.iterations,
        report.final_residual
    )]
    Divergence {
        condition: f64,
        report: Box<RefinementReport>,
    },

    #[error(
        "refinement did not converge in {} iterations (residual {:.3e})",
        report.iterations,
        report.final_residual
    )]
    NonConvergence { report: Box<RefinementReport> },

    #[error("singular Schur complement at block {path}")]
    SingularSchur { path: String },

    #[error("block {path}: {source}")]
    Block {
        path: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage}-stage: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("parse error at offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("class '{class}' has {available} instances, need {needed}")]
    InsufficientClass {
        class: char,
        available: usize,
        needed: usize,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("epoch {epoch}, step {step}: {source}")]
    Training {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_block(self, path: &str) -> Self {
        match self {
            // keep the innermost path only
            e @ Error::Block { .. } => e,
            e @ Error::SingularSchur { .. } => e,
            other => Error::Block {
                path: path.to_string(),
                source: Box::new(other),
            },
        }
    }
}
