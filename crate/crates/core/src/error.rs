use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{what}: expected {expected} entries, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("group size {s} does not divide peer count {n}")]
    IndivisibleGroupSize { n: usize, s: usize },

    #[error("no parallel class found for n={n}, s={s} within the search budget")]
    ScheduleSearchExhausted { n: usize, s: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("schedule covers {schedule_n} peers but the run has {peers}")]
    ScheduleMismatch { schedule_n: usize, peers: usize },

    #[error(
        "{iterations} iterations exceed the private limit of {limit} for gap {gap}; \
         pass the unsafe override to run anyway"
    )]
    PrivacyLimitExceeded {
        iterations: usize,
        limit: usize,
        gap: usize,
    },

    #[error("unknown peer {peer} (run has {n} peers)")]
    UnknownPeer { peer: usize, n: usize },

    #[error("insufficient iterations: need {required}, have {available}")]
    InsufficientIterations { required: usize, available: usize },

    #[error("missing message: {0}")]
    MissingMessage(String),

    #[error("operation requires an all-to-all run")]
    NotAllToAll,

    #[error("{0} must be a multiple of the gap {1}")]
    NotMultipleOfGap(usize, usize),

    #[error("training diverged at round {round}, epoch {epoch}")]
    Divergence { round: usize, epoch: usize },

    #[error("malformed transcript: {0}")]
    Transcript(String),

    #[error("malformed dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
