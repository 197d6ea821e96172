use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical failure in {context} at index {index}: {detail}")]
    Numerical {
        context: &'static str,
        index: usize,
        detail: String,
    },

    /// A masked posterior standard deviation is not strictly below the prior
    /// standard deviation, so the closed-form marginal ratio is undefined.
    #[error(
        "posterior std must be strictly below prior std {prior_std} on masked parameters; \
         {} offending indices (first: {:?}), max std/prior_std = {max_ratio}",
        indices.len(),
        indices.iter().take(8).collect::<Vec<_>>()
    )]
    Positivity {
        indices: Vec<usize>,
        max_ratio: f64,
        prior_std: f64,
    },

    #[error("empty calibration set: {0}; supply explicit OOD inputs instead")]
    EmptyCalibration(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// A pipeline stage failed; artifacts written before the failure are kept.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn numerical(context: &'static str, index: usize, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context,
            index,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } | Error::Positivity { .. } => 3,
            Error::EmptyCalibration(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

pub(crate) fn ensure_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}
