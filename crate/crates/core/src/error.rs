use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: channel mismatch, input has {input} channels but kernel expects {kernel}")]
    ChannelMismatch {
        op: &'static str,
        input: usize,
        kernel: usize,
    },

    #[error("{op}: output spatial size would be smaller than 1")]
    OutputTooSmall { op: &'static str },

    #[error("{op}: window {window} exceeds input extent {extent}")]
    WindowExceedsInput {
        op: &'static str,
        window: usize,
        extent: usize,
    },

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("node {0} is not on this tape")]
    UnknownNode(usize),

    #[error("invalid rule: {0}")]
    InvalidRule(String),

    #[error("wrong mask count for {rule}: expected {expected}, got {got}")]
    MaskCount {
        rule: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("block index {index} out of range for {num_blocks} blocks")]
    BlockIndex { index: usize, num_blocks: usize },

    #[error("enumeration domain has {entries} mask entries, cap is {cap}")]
    EnumerationCap { entries: usize, cap: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
