//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("action not available in this state")]
    ActionNotAvailable,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("target and sink predicates overlap at {0:?}")]
    PredicateOverlap(Vec<f64>),
}

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error("evaluation budget exceeded; achievable precision {achieved}")]
    BudgetExceeded { achieved: f64 },
    #[error("cannot approximate over an empty set")]
    EmptySet,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(
        "bound crossing at state {state:?} action {action:?}: lower {lower} > upper {upper} \
         (unsound configuration, e.g. a Lipschitz constant that is too small)"
    )]
    BoundCrossing { state: Vec<f64>, action: Vec<f64>, lower: f64, upper: f64 },
    #[error("bound {0} outside [0, 1]")]
    BoundOutOfRange(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(
        "bound gap stagnated at {gap} for {window} consecutive probes \
         (the model may violate the absorption requirement)"
    )]
    Stagnation { gap: f64, window: u64 },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },
    #[error("unsupported format version {found} for {kind} (supported major: {supported})")]
    Version { kind: String, found: String, supported: u32 },
    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },
    #[error("snapshot fingerprint {snapshot} does not match model fingerprint {model}")]
    FingerprintMismatch { snapshot: String, model: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}
