use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("index {index} out of range for {op} (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("differentiated output must be scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("variable belongs to a different tape")]
    ForeignVar,

    #[error("inner gradient was computed without retaining its graph")]
    NotRetained,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
