use thiserror::Error;

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor shape {shape:?} requires {expected} values, got {found}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("layer {index} expects {expected} inputs but the previous stage produces {found}")]
    LayerChain {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable does not belong to this graph")]
    ForeignVariable,

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),

    #[error("optimizer state does not match parameter store: {0}")]
    OptimizerMismatch(String),

    #[error("checkpoint I/O")]
    Io(#[from] std::io::Error),

    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint header: {0}")]
    Header(String),
}
