//! Crate-wide error type. Variants map onto process exit codes in the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dataset parsing, missing input files, malformed split rows.
    #[error("ingest: {0}")]
    Ingest(String),

    /// Checkpoint format violations and model/dataset shape mismatches.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Config or grid file problems, invalid hyperparameters.
    #[error("config: {0}")]
    Config(String),

    /// Training-time failures (non-finite loss or gradients).
    #[error("train: {0}")]
    Train(String),

    /// Evaluation contract violations (bad k, no eligible users).
    #[error("eval: {0}")]
    Eval(String),

    /// Synthetic-world generation problems.
    #[error("synth: {0}")]
    Synth(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code the CLI reports for this error.
    ///
    /// 2 = ingest/missing file, 3 = checkpoint mismatch, 4 = config parse,
    /// 1 = anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Ingest(_) => 2,
            Error::Checkpoint(_) => 3,
            Error::Config(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_match_contract() {
        assert_eq!(Error::Ingest("x".into()).exit_code(), 2);
        assert_eq!(Error::Checkpoint("x".into()).exit_code(), 3);
        assert_eq!(Error::Config("x".into()).exit_code(), 4);
        assert_eq!(Error::Train("x".into()).exit_code(), 1);
    }
}
