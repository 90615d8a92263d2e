use thiserror::Error;

/// Errors produced by the library.
///
/// The variants map onto the CLI exit codes: [`Error::SolverFailure`] is a
/// solver failure, everything else is an input/precondition error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("point outside domain: {0}")]
    OutOfDomain(String),

    #[error("solver failure: {message}")]
    SolverFailure {
        message: String,
        diagnostics: Option<Box<crate::cartogram::SolverDiagnostics>>,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("format error at line {line}: {message}")]
    FormatLine { line: u64, message: String },

    /// Error raised while processing one element of a batch (a path sample,
    /// an embedding row).
    #[error("at index {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::OutOfDomain(msg.into())
    }

    pub(crate) fn solver(msg: impl Into<String>) -> Self {
        Error::SolverFailure {
            message: msg.into(),
            diagnostics: None,
        }
    }

    pub(crate) fn at(index: usize, source: Error) -> Self {
        Error::AtIndex {
            index,
            source: Box::new(source),
        }
    }

    /// True for solver failures, including ones wrapped by [`Error::AtIndex`].
    pub fn is_solver_failure(&self) -> bool {
        match self {
            Error::SolverFailure { .. } => true,
            Error::AtIndex { source, .. } => source.is_solver_failure(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
