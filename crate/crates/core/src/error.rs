//! Error types for configuration and runtime failures.
//!
//! Shape mismatches between tensors are programming errors and panic at the
//! call site with the offending op and shapes; everything that can be caused
//! by user input (configs, files, CLI values) flows through these enums.

use thiserror::Error;

/// Invalid experiment or family configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("class splits {train}+{val}+{test} exceed {total} available classes")]
    SplitOverflow {
        train: usize,
        val: usize,
        test: usize,
        total: usize,
    },
    #[error("episode needs {needed} instances per class but family provides {available}")]
    EpisodeTooLarge { needed: usize, available: usize },
    #[error("unknown algorithm id {0:?}")]
    UnknownAlgorithm(String),
}

/// Runtime failures: I/O, serialization, and training divergence.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("training diverged at iteration {iteration}: {what}")]
    Diverged { iteration: usize, what: String },
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}
