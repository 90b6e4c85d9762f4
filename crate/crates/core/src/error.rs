use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid system: {0}")]
    InvalidSystem(String),

    #[error("enumerating {cells} cells exceeds the guardrail cap of {cap}")]
    CapExceeded { cells: u128, cap: u64 },

    #[error("base mismatch: expected {expected}, found {found}")]
    BaseMismatch { expected: String, found: String },

    #[error(
        "exact discrepancy search over {candidates} witness candidates exceeds the cap of {cap}; \
         use the heuristic oracle for this instance"
    )]
    DiscrepancyInfeasible { candidates: u128, cap: u64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("iteration cap exceeded: {0}")]
    IterationCap(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("malformed input: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
