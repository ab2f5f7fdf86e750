use std::path::PathBuf;

/// Failure modes surfaced by the library.
///
/// Configuration problems and numerical failures are kept distinct so the
/// command-line driver can map them onto different exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid argument: {0}")]
    Usage(String),
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("linear solver failure: {0}")]
    Solver(String),
    #[error("eigensolver did not converge after {iterations} iterations; worst residual {worst_residual:.3e}")]
    EigenNonConvergence {
        iterations: usize,
        worst_residual: f64,
        residuals: Vec<f64>,
    },
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("missing artefact {path}: {hint}")]
    MissingArtefact { path: PathBuf, hint: String },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than by the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Usage(_) | Error::MissingArtefact { .. }
        )
    }

    /// True for failures of the numerical machinery itself.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Solver(_)
                | Error::EigenNonConvergence { .. }
                | Error::NotPositiveDefinite(_)
                | Error::Numerical(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
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
