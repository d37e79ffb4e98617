//! Crate-wide error type.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors reported by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A mesh violates a structural requirement (bad indices, degenerate
    /// faces, unexpected vertex/face counts).
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    /// A vertex that is required to have incident faces has none.
    #[error("vertex {vertex} is isolated (not referenced by any face)")]
    IsolatedVertex {
        /// Index of the offending vertex.
        vertex: usize,
    },

    /// An operation that needs a connected surface found unreachable vertices.
    #[error("mesh is disconnected: vertex {vertex} is unreachable from vertex {start}")]
    DisconnectedMesh {
        /// Source vertex of the traversal.
        start: usize,
        /// A vertex that was not reached.
        vertex: usize,
    },

    /// Input geometry is too degenerate for the requested computation.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Sizes of related inputs do not agree.
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        /// Expected size.
        expected: usize,
        /// Actual size.
        got: usize,
        /// What was being compared.
        context: &'static str,
    },

    /// Model training cannot proceed (too few samples, zero variance, ...).
    #[error("degenerate training data: {0}")]
    DegenerateTraining(String),

    /// Probabilistic inference reached a numerically impossible state.
    #[error("inference failed: {0}")]
    Inference(String),

    /// The minimizer could not make progress.
    #[error("optimizer failed after {iterations} iterations (energy {energy}): {message}")]
    Optimizer {
        /// Description of the failure.
        message: String,
        /// Energy at the best point found.
        energy: f64,
        /// Iterations performed before giving up.
        iterations: usize,
    },

    /// An I/O failure while reading or writing files.
    #[error("i/o error on {path}: {source}")]
    Io {
        /// File involved.
        path: String,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },

    /// A file did not parse as the expected format.
    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        /// File involved.
        path: String,
        /// 1-based line number (0 when not line-oriented).
        line: usize,
        /// What went wrong.
        message: String,
    },

    /// A binary container had the wrong magic, version or payload kind.
    #[error("container error in {path}: {message}")]
    Container {
        /// File involved.
        path: String,
        /// What went wrong.
        message: String,
    },
}

impl Error {
    /// Wraps an [`std::io::Error`] with the path it occurred on.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Builds a parse error for `path` at `line`.
    pub fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, message: message.into() }
    }
}
