use thiserror::Error;

/// Problems with the run configuration; the process exits with code 1.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed TOML: {0}")]
    Syntax(String),

    #[error("missing required keys: {}", .0.join(", "))]
    MissingKeys(Vec<String>),

    #[error("invalid configuration: {0}")]
    Schema(String),

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Core(#[from] mfcrowd_core::Error),
}

/// Failure of a run after its configuration was accepted.
#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("cannot write artifacts: {0}")]
    Io(#[from] std::io::Error),

    #[error("solver error: {0}")]
    Solver(#[from] mfcrowd_core::Error),

    #[error("convexity check failed for the {arm} arm ({detail}); rerun with --override-convexity to proceed")]
    Convexity { arm: &'static str, detail: String },
}

impl RunError {
    /// Process exit code: 3 for a convexity violation, 1 otherwise. Stalls
    /// are not errors; see `RunSummary::exit_code`.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Convexity { .. } => 3,
            _ => 1,
        }
    }
}
