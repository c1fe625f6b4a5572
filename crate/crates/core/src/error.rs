use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{name} = {value} is out of range ({range})")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("index {name} = {value} outside 1..={max}")]
    IndexOutOfRange {
        name: &'static str,
        value: usize,
        max: usize,
    },

    #[error("non-finite value at ({row}, {col}) in {context}")]
    NonFinite {
        context: &'static str,
        row: usize,
        col: usize,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("admissible entry ({row}, {col}) of kernel {layer} is exactly zero")]
    ZeroAdmissibleEntry { layer: usize, row: usize, col: usize },

    #[error("full rollout matrix not accumulated (enable full-matrix mode)")]
    MissingFullMatrix,

    #[error("schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }

    /// Stable short name used in machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::OutOfRange { .. } | Error::IndexOutOfRange { .. } => "out_of_range",
            Error::NonFinite { .. } => "non_finite",
            Error::Invariant(_) => "invariant",
            Error::Undefined(_) => "undefined",
            Error::ZeroAdmissibleEntry { .. } => "zero_admissible_entry",
            Error::MissingFullMatrix => "missing_full_matrix",
            Error::SchemaMismatch { .. } => "schema_mismatch",
            Error::Malformed(_) | Error::Json(_) | Error::Csv(_) => "malformed",
            Error::Io(_) => "io",
        }
    }
}
