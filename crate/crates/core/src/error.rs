use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("scale factor for `{name}` must be positive (1 + s = {factor})")]
    NonPositiveScale { name: String, factor: f64 },

    #[error("singular linear part (|det| = {det:e})")]
    Singular { det: f64 },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid task definition: {0}")]
    Task(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid camera: {0}")]
    Camera(String),

    #[error("image shape mismatch: expected {expected_w}x{expected_h}, got {actual_w}x{actual_h}")]
    ShapeMismatch {
        expected_w: usize,
        expected_h: usize,
        actual_w: usize,
        actual_h: usize,
    },

    #[error("downsample factor {factor} does not divide {width}x{height}")]
    IndivisibleFactor {
        factor: usize,
        width: usize,
        height: usize,
    },

    #[error("invalid network spec: {0}")]
    NetworkSpec(String),

    #[error("non-finite gradient at parameter {index} ({value})")]
    NonFiniteGradient { index: usize, value: f64 },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("non-finite prediction for record {record}")]
    NonFinitePrediction { record: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate point configuration for rigid alignment")]
    DegenerateAlignment,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
