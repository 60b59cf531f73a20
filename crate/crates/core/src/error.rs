use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("every state has zero probability at t={t}; the model does not describe the data")]
    AllStatesImpossible { t: usize },

    #[error("state {state} has zero total occupancy and cannot be reestimated")]
    EmptyStateOccupancy { state: usize },

    #[error("trace {index}: {source}")]
    Trace {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("Baum-Welch iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training set {set}: {source}")]
    TrainingSet {
        set: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("profile likelihood for {parameter} did not converge: {reason}")]
    ProfileDidNotConverge { parameter: String, reason: String },

    #[error("profile likelihood for {parameter} does not fall off within the search range")]
    NonMonotoneProfile { parameter: String },

    #[error("length mismatch: expected {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("window of {window} samples exceeds trace length {len}")]
    WindowExceedsTrace { window: usize, len: usize },

    #[error("training set has no ground-truth labels")]
    Unlabeled,

    #[error("scaled transition probability A_{i}{j} * t_s = {value} is not a probability")]
    ScaledProbabilityInvalid { i: usize, j: usize, value: f64 },

    #[error("unknown scenario preset '{0}'")]
    UnknownPreset(String),

    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),

    #[error("rate ratio must be positive, got {0}")]
    NonPositiveRatio(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scenario point {point}: {source}")]
    Scenario {
        point: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

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

    pub(crate) fn in_trace(self, index: usize) -> Self {
        Error::Trace {
            index,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Trace { source, .. }
            | Error::Training { source, .. }
            | Error::TrainingSet { source, .. }
            | Error::Scenario { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_)
            | Error::UnknownPreset(_)
            | Error::UnknownParameter(_)
            | Error::InvalidParams(_)
            | Error::InvalidTrace(_)
            | Error::Unlabeled
            | Error::WindowExceedsTrace { .. }
            | Error::LengthMismatch { .. }
            | Error::ScaledProbabilityInvalid { .. }
            | Error::NonPositiveRatio(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Json(_) => 4,
            _ => 3,
        }
    }
}
