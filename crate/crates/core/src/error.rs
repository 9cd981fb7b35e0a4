use thiserror::Error;

pub type Result<T> = std::result::Result<T, DmapError>;

#[derive(Debug, Error)]
pub enum DmapError {
    #[error("class `{0}` has no instances")]
    MissingClass(String),

    #[error("label `{0}` is not a seen class")]
    UnknownLabel(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("instance `{0}` has no prediction")]
    MissingInstance(String),

    #[error("class `{0}` is not among the candidates")]
    UnknownClass(String),

    #[error("infeasible synthetic configuration: {0}")]
    InfeasibleConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DmapError {
    /// Process exit code used by the CLI: 2 for invalid input, 3 for numerical
    /// failure, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            DmapError::SingularSystem(_) => 3,
            DmapError::Io(_) => 4,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DmapError::MissingClass(_) => "MissingClass",
            DmapError::UnknownLabel(_) => "UnknownLabel",
            DmapError::SingularSystem(_) => "SingularSystem",
            DmapError::DimensionMismatch(_) => "DimensionMismatch",
            DmapError::EmptyTrainingSet => "EmptyTrainingSet",
            DmapError::EmptyTestSet => "EmptyTestSet",
            DmapError::MissingInstance(_) => "MissingInstance",
            DmapError::UnknownClass(_) => "UnknownClass",
            DmapError::InfeasibleConfig(_) => "InfeasibleConfig",
            DmapError::InvalidInput(_) => "InvalidInput",
            DmapError::Parse { .. } => "ParseError",
            DmapError::ShapeMismatch(_) => "ShapeMismatch",
            DmapError::Io(_) => "IoError",
            DmapError::Json(_) => "JsonError",
        }
    }
}
