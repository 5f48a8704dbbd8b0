use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // skeleton files
    #[error("skeleton stream ended early: expected {expected} at token {position}")]
    TruncatedFile { expected: &'static str, position: usize },
    #[error("malformed number {token:?} at token {position}")]
    MalformedNumber { token: String, position: usize },
    #[error("non-finite value {token:?} at token {position}")]
    NonFiniteValue { token: String, position: usize },
    #[error("body declares {found} joints, sequence expects {expected}")]
    JointCountMismatch { expected: usize, found: usize },
    #[error("sequence has no frame with a body")]
    EmptySequence,
    #[error("invalid sample id {0:?}")]
    InvalidSampleId(String),

    // topology / modalities
    #[error("topology has {topology} pairs but tensor has {vertices} vertices")]
    TopologyShapeMismatch { topology: usize, vertices: usize },
    #[error("invalid bone topology: {0}")]
    InvalidTopology(String),

    // parsing maps
    #[error("bounding box does not intersect the label map")]
    EmptyIntersection,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("frame {index} is {found:?}, expected {expected:?}")]
    FrameSizeMismatch { index: usize, expected: (u32, u32), found: (u32, u32) },
    #[error("{frames} frames do not fit a {rows}x{cols} grid")]
    GridTooSmall { frames: usize, rows: usize, cols: usize },
    #[error("invalid image data: {0}")]
    Image(String),

    // tensors and models
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("vertex index {index} out of range for {vertices} vertices")]
    IndexOutOfRange { index: usize, vertices: usize },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    // fusion and metrics
    #[error("score matrices disagree on sample ids")]
    SampleMismatch,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("missing scores for modality {0}")]
    MissingScores(String),

    // pipeline
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} needs {missing}; run it first")]
    StageDependencyMissing { stage: String, missing: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Validation failures map to exit code 1, everything else to 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::StageDependencyMissing { .. } => 1,
            _ => 2,
        }
    }
}
