use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{primitive}: {detail}")]
    Shape { primitive: &'static str, detail: String },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("primitive `{primitive}` requires attribute `{attr}`")]
    MissingAttribute {
        primitive: &'static str,
        attr: &'static str,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("function value is not finite ({0})")]
    NonFinite(f64),
    #[error("variable {0} does not belong to this tape")]
    ForeignVar(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub(crate) fn shape_err(primitive: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape {
        primitive,
        detail: detail.into(),
    }
}
