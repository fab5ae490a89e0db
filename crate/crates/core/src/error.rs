use std::path::PathBuf;

use crate::genome::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid search space: {0}")]
    InvalidSpec(String),
    #[error("invalid genome: {}", format_violations(.0))]
    InvalidGenome(Vec<Violation>),
    #[error("parents were built for different search spaces")]
    SpecMismatch,
    #[error("population is empty")]
    EmptyPopulation,
    #[error("invalid population: {0}")]
    InvalidPopulation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {layer}")]
    NonFinite {
        layer: String,
        /// JSON of the individual being trained or evaluated when known.
        genome: Option<String>,
    },
    #[error("dataset format error: {0}")]
    Format(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by the run configuration or its inputs rather than by
    /// something going wrong during the run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidSpec(_)
                | Error::InvalidGenome(_)
                | Error::SpecMismatch
                | Error::InvalidPopulation(_)
                | Error::Config(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
