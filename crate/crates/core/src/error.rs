use thiserror::Error;

use crate::env_sim::SpecViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid environment spec: {}", format_violations(.0))]
    InvalidSpec(Vec<SpecViolation>),

    #[error("spec file line {line}: {message}")]
    SpecParse { line: usize, message: String },

    #[error("band {band} out of range for a {n_bands}-band spectrum")]
    BandOutOfRange { band: usize, n_bands: usize },

    #[error("controller chose band {band} at t={t} (spectrum has {n_bands} bands)")]
    ControllerAction { t: usize, band: usize, n_bands: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("block IoU needs at least one step")]
    EmptyWindow,

    #[error("differential block IoU needs t >= N (t={t}, N={n})")]
    WindowTooShort { t: usize, n: usize },

    #[error("observations are inconsistent with the prior ranges")]
    InconsistentPrior,

    #[error("prior enumerates {size} tuples per pair (cap {cap}); use a coarser prior")]
    PriorTooLarge { size: u128, cap: u128 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("network has no {0} head")]
    MissingHead(&'static str),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("insufficient field evidence: no detections in any episode")]
    InsufficientEvidence,

    #[error("{0} has not been trained")]
    Untrained(&'static str),

    #[error("state database is empty")]
    EmptyDatabase,

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from user input (spec or config) rather than
    /// a failure while running.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidSpec(_)
                | Error::SpecParse { .. }
                | Error::Config(_)
                | Error::PriorTooLarge { .. }
        )
    }
}

fn format_violations(v: &[SpecViolation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
