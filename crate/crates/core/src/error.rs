//! Shared error type for every pipeline stage.

use thiserror::Error;

/// Errors surfaced by the toolkit.
///
/// Variants are grouped by failure class so callers (notably the CLI) can
/// map them onto stable exit codes: configuration problems, data problems,
/// numerical divergence, and empty selections/partitions.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument or configuration value.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Requested operation is not supported for the given input.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Input does not match the expected schema (e.g. missing CSV column).
    #[error("schema error: {0}")]
    Schema(String),

    /// Malformed input data.
    #[error("parse error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse {
        /// 1-based line number when known.
        line: Option<usize>,
        msg: String,
    },

    /// A log was empty where at least one trace is required.
    #[error("empty event log: {0}")]
    EmptyLog(String),

    /// Tensor shapes do not line up.
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// Value outside an operation's numeric domain (e.g. log of a
    /// non-positive number).
    #[error("domain error: {0}")]
    Domain(String),

    /// Label not present in the vocabulary.
    #[error("unknown label: {0}")]
    Vocabulary(String),

    /// Trace longer than the configured maximum.
    #[error("trace {case_id} has {len} events, exceeding max length {max_len}")]
    TraceTooLong {
        case_id: String,
        len: usize,
        max_len: usize,
    },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    /// Constraint filtering left nothing to work with.
    #[error("empty selection: {0}")]
    Selection(String),

    /// A t+/t- partition cannot drive fine-tuning.
    #[error("partition error: {0}")]
    Partition(String),

    /// Anomaly injection could not mutate a selected case.
    #[error("injection error: {0}")]
    Injection(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code class for this error.
    ///
    /// 2 = configuration, 3 = data, 4 = numerical divergence,
    /// 5 = selection/partition.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Unsupported(_) => 2,
            Error::Schema(_)
            | Error::Parse { .. }
            | Error::EmptyLog(_)
            | Error::Shape { .. }
            | Error::Domain(_)
            | Error::Vocabulary(_)
            | Error::TraceTooLong { .. }
            | Error::Injection(_)
            | Error::Io(_) => 3,
            Error::Divergence { .. } => 4,
            Error::Selection(_) | Error::Partition(_) => 5,
        }
    }

    /// Stable lowercase tag for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::Unsupported(_) => "unsupported",
            Error::Schema(_) => "schema",
            Error::Parse { .. } => "parse",
            Error::EmptyLog(_) => "empty_log",
            Error::Shape { .. } => "shape",
            Error::Domain(_) => "domain",
            Error::Vocabulary(_) => "vocabulary",
            Error::TraceTooLong { .. } => "trace_too_long",
            Error::Divergence { .. } => "divergence",
            Error::Selection(_) => "selection",
            Error::Partition(_) => "partition",
            Error::Injection(_) => "injection",
            Error::Io(_) => "io",
        }
    }
}
