use hiformer_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown model `{0}` (expected hiformer-s, hiformer-b, hiformer-l, hiformer-tiny or a config file)")]
    UnknownModel(String),
    #[error("invalid config: rule `{rule}` violated: {detail}")]
    InvalidConfig { rule: &'static str, detail: String },
    #[error("input {h}x{w} is not divisible by {by}")]
    IndivisibleInput { h: usize, w: usize, by: usize },
    #[error("token grid {h}x{w} is not divisible by window {window}")]
    IndivisibleGrid { h: usize, w: usize, window: usize },
    #[error("patch merging needs an even grid, got {h}x{w}")]
    OddGrid { h: usize, w: usize },
    #[error("class token of an empty token set")]
    EmptyTokens,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss diverged (non-finite) at step {step}")]
    DivergedLoss { step: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("not a checkpoint (bad magic or version)")]
    BadMagic,
    #[error("checkpoint ended early")]
    UnexpectedEof,
    #[error("shape mismatch for `{name}`: checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint has no tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint tensor `{0}` does not exist in the model")]
    UnexpectedTensor(String),
    #[error("checkpoint tensor `{name}` has unsupported dtype tag {tag}")]
    UnsupportedDtype { name: String, tag: u8 },
    #[error("unsupported raster format `{0}` (expected P5 or P6)")]
    UnsupportedFormat(String),
    #[error("corrupt raster header: {0}")]
    CorruptHeader(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
