use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("label space must have at least 2 classes, got {0}")]
    InvalidLabelSpace(usize),
    #[error("probability vector has length {got}, expected {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("probability entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },
    #[error("probability vector sums to {sum}, not 1")]
    BadSum { sum: f64 },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: row has {got} probabilities, header declares {expected}")]
    InconsistentK {
        line: u64,
        expected: usize,
        got: usize,
    },
    #[error("label {label} out of range for K={k}")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split would leave an empty side (n={n}, eval={eval})")]
    EmptySplit { n: usize, eval: usize },
    #[error("accuracy anchor {accuracy} must lie strictly between 1/K={lower} and 1")]
    AccuracyOutOfRange { accuracy: f64, lower: f64 },
    #[error("operation requires rows with a true label")]
    NoSupervisedRows,
    #[error("Dirichlet mode undefined for column {column}")]
    DegenerateMode { column: usize },
    #[error("single-parameter diagonal {value} must lie in (1/K, 1)")]
    SpOutOfRange { value: f64 },
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("method {method} requires field `{field}`")]
    MethodFieldMissing { method: String, field: &'static str },
    #[error("method {method} does not use field `{field}`")]
    UnexpectedField { method: String, field: &'static str },
    #[error("oracle posteriors are required for this computation")]
    OracleRequired,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("requested size {size} exceeds available rows {available}")]
    SizeTooLarge { size: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable identifier for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidLabelSpace(_) => "InvalidLabelSpace",
            Error::WrongLength { .. } => "WrongLength",
            Error::NegativeEntry { .. } => "NegativeEntry",
            Error::BadSum { .. } => "BadSum",
            Error::NonFinite(_) => "NonFinite",
            Error::Parse { .. } => "ParseError",
            Error::InconsistentK { .. } => "InconsistentK",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::EmptyDataset => "EmptyDataset",
            Error::EmptySplit { .. } => "EmptySplit",
            Error::AccuracyOutOfRange { .. } => "AccuracyOutOfRange",
            Error::NoSupervisedRows => "NoSupervisedRows",
            Error::DegenerateMode { .. } => "DegenerateMode",
            Error::SpOutOfRange { .. } => "SpOutOfRange",
            Error::TooFewRows { .. } => "TooFewRows",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::MethodFieldMissing { .. } => "MethodFieldMissing",
            Error::UnexpectedField { .. } => "UnexpectedField",
            Error::OracleRequired => "OracleRequired",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::SizeTooLarge { .. } => "SizeTooLarge",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
        }
    }
}
