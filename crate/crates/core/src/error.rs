use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("taxonomy has no levels")]
    NoLevels,

    #[error("level {level} ({name}) has no classes")]
    EmptyLevel { level: usize, name: String },

    #[error("duplicate class name {class:?} in level {level}")]
    DuplicateClass { level: usize, class: String },

    #[error("class {class:?} in level {level} is listed under more than one parent")]
    MultipleParents { level: usize, class: String },

    #[error("orphan class {class:?} in level {level}: parent {parent:?} does not exist in level {}", level - 1)]
    OrphanClass {
        level: usize,
        class: String,
        parent: String,
    },

    #[error("class {class:?} in level {level} has no parent")]
    MissingParent { level: usize, class: String },

    #[error("class {class:?} in the root level must not name a parent")]
    RootWithParent { class: String },

    #[error("level {level} out of range (taxonomy has {levels} levels)")]
    LevelOutOfRange { level: usize, levels: usize },

    #[error("class id {id} out of range for level {level} ({classes} classes)")]
    ClassOutOfRange { level: usize, id: usize, classes: usize },

    #[error("label path has {got} entries, taxonomy has {expected} levels")]
    PathLength { expected: usize, got: usize },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty prediction set")]
    EmptyPredictions,

    #[error("training diverged at epoch {epoch}: {what} is not finite")]
    Diverged { epoch: usize, what: &'static str },

    #[error("gradient check failed for {param}[{index}]: analytic {analytic:.6e}, numeric {numeric:.6e}")]
    GradientCheck {
        param: &'static str,
        index: usize,
        analytic: f64,
        numeric: f64,
    },

    #[error("malformed {kind} file {path}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NoLevels
            | Error::EmptyLevel { .. }
            | Error::DuplicateClass { .. }
            | Error::MultipleParents { .. }
            | Error::OrphanClass { .. }
            | Error::MissingParent { .. }
            | Error::RootWithParent { .. } => "invalid_taxonomy",
            Error::LevelOutOfRange { .. } | Error::ClassOutOfRange { .. } | Error::PathLength { .. } => "out_of_range",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ZeroNorm(_) => "zero_norm",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::EmptyPredictions => "empty_predictions",
            Error::Diverged { .. } => "diverged",
            Error::GradientCheck { .. } => "gradient_check",
            Error::Format { .. } => "malformed_file",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
