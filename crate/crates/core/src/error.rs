use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the calibration-design toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The information matrix of a plan is singular or too ill-conditioned
    /// for the active parameter set.
    #[error(
        "unidentifiable plan: information matrix condition number {condition:.3e} \
         (limit {limit:.0e}); unobservable directions: {}",
        if directions.is_empty() { "none reported".to_string() } else { directions.join("; ") }
    )]
    Unidentifiable {
        condition: f64,
        limit: f64,
        directions: Vec<String>,
    },

    #[error("infeasible problem: {rejections} consecutive samples violated the constraints")]
    Infeasible { rejections: u64 },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {}: {message}", path.display())]
    Csv { path: PathBuf, message: String },

    #[error("simulation trial {trial} failed: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn is_unidentifiable(&self) -> bool {
        match self {
            Error::Unidentifiable { .. } => true,
            Error::Trial { source, .. } => source.is_unidentifiable(),
            _ => false,
        }
    }
}
