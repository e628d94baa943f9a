use thiserror::Error;

/// Errors produced by the calibration monitoring library.
#[derive(Debug, Error)]
pub enum Error {
    /// A model parameter is outside its domain (non-finite input, `delta <= 0`, ...).
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    /// Structurally invalid input such as mismatched lengths or an empty batch.
    #[error("invalid input: {0}")]
    Input(String),

    /// A record or batch arrived out of time order.
    #[error("sequencing error: {0}")]
    Sequencing(String),

    /// A record failed validation while being ingested.
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },

    /// Chart or ensemble configuration rejected.
    #[error("configuration error: {0}")]
    Config(String),

    /// Every outcome is identical, so the likelihood is maximized on the boundary.
    #[error("degenerate data: all {n} outcomes equal {value}")]
    DegenerateData { n: usize, value: u8 },

    /// The optimizer hit its iteration budget. Carries the best point found.
    #[error(
        "recalibration fit did not converge after {iterations} iterations \
         (best delta={delta}, gamma={gamma}, loglik={loglik})"
    )]
    NotConverged {
        delta: f64,
        gamma: f64,
        loglik: f64,
        iterations: usize,
    },

    /// Every simulated run hit the horizon cap.
    #[error("no completed runs to summarize ({truncated} truncated)")]
    AllTruncated { truncated: usize },

    /// A snapshot was produced under a different configuration.
    #[error("snapshot does not match configuration (snapshot {snapshot}, config {config})")]
    SnapshotMismatch { snapshot: String, config: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
