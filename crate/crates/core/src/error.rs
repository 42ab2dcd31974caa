use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("node index {index} out of range for graph with {num_nodes} nodes")]
    IndexOutOfRange { index: usize, num_nodes: usize },
    #[error("coordinate row {row} has {found} components, expected {expected}")]
    RaggedCoords { row: usize, expected: usize, found: usize },
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("mask is {rows}x{cols}, expected a square mask")]
    NonSquare { rows: usize, cols: usize },
    #[error("requested {requested} random pairs but only {available} non-edges exist")]
    TooManyRequested { requested: usize, available: usize },
    #[error("head mask plan needs at least {required} layers, got {layers}")]
    PlanRequiresMoreLayers { required: usize, layers: usize },
    #[error("dilation plans need at least 2 heads, got {heads}")]
    PlanRequiresMoreHeads { heads: usize },
    #[error("eigendecomposition failed: {0}")]
    EigenFailure(String),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("non-finite loss {loss} at step {step} (lr {lr})")]
    NonFiniteLoss { step: usize, loss: f64, lr: f64 },
    #[error("masking selected no nodes")]
    NoMaskedNodes,
    #[error("rollout of {steps} steps from t={start} exceeds trajectory length {len}")]
    HorizonExceeded { start: usize, steps: usize, len: usize },
    #[error("trajectory has {len} frames, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("need at least {min} runs, got {got}")]
    TooFewRuns { min: usize, got: usize },
    #[error("power-law fit requires positive inputs")]
    NonPositiveInput,
    #[error("budget {budget:.3e} gives {steps} steps for {params} parameters, need at least {min}")]
    BudgetTooSmall { budget: f64, params: usize, steps: usize, min: usize },
    #[error("corrupt meta in {path}: {reason}")]
    CorruptMeta { path: PathBuf, reason: String },
    #[error("blob {path} has {found} bytes, meta declares {expected}")]
    LengthMismatch { path: PathBuf, expected: u64, found: u64 },
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("could not generate a connected graph after {attempts} attempts")]
    DegenerateGeometry { attempts: usize },
    #[error("invalid stability bound: dt*kappa*deg_max = {value} >= 0.5")]
    UnstableTimestep { value: f64 },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
