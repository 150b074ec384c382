use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("reduction over an empty extent")]
    EmptyReduction,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {class} is never annotated")]
    ClassNeverAnnotated { class: usize },

    #[error("distribution off the simplex by {residual:e} at column {column}")]
    OffSimplex { column: usize, residual: f64 },

    #[error("zero gradient, perturbation undefined")]
    ZeroGradient,

    #[error("undefined distance: {0} mask is empty")]
    EmptyMask(&'static str),

    #[error("empty trimap band")]
    EmptyBand,

    #[error("weak label inconsistent with proposals")]
    InconsistentWeakLabel,

    #[error("could not place {wanted} non-overlapping objects after {tries} tries")]
    Placement { wanted: usize, tries: usize },

    #[error("no non-ignored anchors")]
    NoTrainableAnchors,

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
