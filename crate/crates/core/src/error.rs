use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum ScoolError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("cannot normalize row {row}: row sum is {sum}")]
    Normalization { row: usize, sum: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("divergence at client {client}, step {step}: {detail}")]
    Divergence {
        client: usize,
        step: usize,
        detail: String,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("degenerate membership: denominator {denominator:e} for block ({a}, {b})")]
    DegenerateMembership { a: usize, b: usize, denominator: f64 },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<ScoolError>,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ScoolError {
    /// True for configuration problems (maps to the CLI's config exit code).
    pub fn is_config(&self) -> bool {
        match self {
            ScoolError::Config(_) | ScoolError::Json(_) => true,
            ScoolError::Round { source, .. } => source.is_config(),
            _ => false,
        }
    }

    /// True when the run diverged (non-finite model or variational parameters).
    pub fn is_divergence(&self) -> bool {
        match self {
            ScoolError::Divergence { .. } => true,
            ScoolError::Round { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, ScoolError>;
