use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A probe forward pass produced a non-finite loss or directional derivative.
    #[error("divergence: loss+ = {loss_plus}, loss- = {loss_minus}")]
    Divergence { loss_plus: f64, loss_minus: f64 },

    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("codebook with {codes} codes cannot be fit to {groups} weight groups")]
    DegenerateCodebook { codes: usize, groups: usize },

    #[error("layer file: {0}")]
    Format(String),

    #[error("csv row {row}, column {column:?}: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("no analytic gradient available: {0}")]
    OracleUnavailable(String),

    #[error("unknown memory mode {0:?}")]
    UnknownMode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::Config {
            line: 0,
            message: message.into(),
        }
    }

    /// True for errors that come from a malformed run configuration.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::InvalidArgument(_) | Error::UnknownMode(_)
        )
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let row = err
            .position()
            .map(|p| p.record() as usize)
            .unwrap_or_default();
        Error::Csv {
            row,
            column: String::new(),
            message: err.to_string(),
        }
    }
}
