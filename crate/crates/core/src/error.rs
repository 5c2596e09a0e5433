use std::path::PathBuf;

/// Errors surfaced by the engine. The CLI maps these onto exit codes:
/// config errors -> 2, data errors -> 3, numeric failures -> 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("expected {expected} axes, got shape {shape:?}")]
    RankMismatch { expected: usize, shape: Vec<usize> },

    #[error("channel mismatch: input has {input} channels, layer expects {expected}")]
    ChannelMismatch { input: usize, expected: usize },

    #[error("degenerate convolution output: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}")]
    DegenerateConvOutput {
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{path}: truncated file at byte offset {offset} (record {record})")]
    TruncatedRecord {
        path: PathBuf,
        offset: u64,
        record: usize,
    },

    #[error("{path}: invalid label byte {label} at record {record} (must be 0..=9)")]
    InvalidLabelByte {
        path: PathBuf,
        label: u8,
        record: usize,
    },

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint tensor `{name}`: manifest shape {manifest:?} does not match expected {expected:?}")]
    CheckpointShape {
        name: String,
        manifest: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint payload too short: need {need} bytes, found {found}")]
    CheckpointPayload { need: u64, found: u64 },

    #[error("checkpoint is not in the expected format: {reason}")]
    CheckpointFormat { reason: String },

    #[error("invalid configuration: field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("class `{class}` has no instances; activation matrix row undefined")]
    EmptyClass { class: String },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("trace is inconsistent with block spec: {reason}")]
    TraceMismatch { reason: String },

    #[error("empty trace set: no instances to aggregate")]
    EmptyTraceSet,

    #[error("dataset exhausted: requested {requested} instances, have {available}")]
    DataExhausted { requested: usize, available: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            Config { .. } | CheckpointVersion { .. } | CheckpointShape { .. } => 2,
            TruncatedRecord { .. }
            | InvalidLabelByte { .. }
            | CheckpointPayload { .. }
            | CheckpointFormat { .. }
            | DataExhausted { .. }
            | Io(_)
            | Json(_) => 3,
            NonFinite { .. } => 4,
            _ => 1,
        }
    }
}
