use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("text error: {0}")]
    Text(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid span ({start}, {end}) for {len} frames")]
    Span { start: usize, end: usize, len: usize },
    #[error("missing groundtruth: {0}")]
    MissingGroundtruth(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("training diverged at step {step} on samples {samples:?}: {detail}")]
    Diverged {
        step: usize,
        samples: Vec<usize>,
        detail: String,
    },
}

pub type Result<T> = core::result::Result<T, Error>;
