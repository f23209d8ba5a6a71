//! Error values shared across the engine.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// A class label is out of range for the configured class count.
    InvalidLabel { index: usize, bound: usize },
    /// A domain label is out of range for the configured task count.
    InvalidDomain { index: usize, bound: usize },
    EmptyBatch,
    /// The semi-supervised loss needs at least one labeled sample.
    EmptyLabeledBatch,
    /// The operation is not defined in the model's training mode.
    WrongMode { op: &'static str },
    /// A snapshot of the previous task's teacher is required but absent.
    MissingSnapshot { task: usize },
    /// Tasks in a sequence must share one input shape.
    InconsistentInputShape { expected: Vec<usize>, got: Vec<usize> },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidLabel { index, bound } => {
                write!(f, "class label {} out of range (classes: {})", index, bound)
            }
            ModelError::InvalidDomain { index, bound } => {
                write!(f, "domain label {} out of range (domains: {})", index, bound)
            }
            ModelError::EmptyBatch => write!(f, "batch is empty"),
            ModelError::EmptyLabeledBatch => write!(f, "labeled batch is empty"),
            ModelError::WrongMode { op } => {
                write!(f, "`{}` is not available in this training mode", op)
            }
            ModelError::MissingSnapshot { task } => {
                write!(f, "task {} requires a teacher snapshot of the previous task", task)
            }
            ModelError::InconsistentInputShape { expected, got } => {
                write!(f, "input shape {:?} does not match sequence shape {:?}", got, expected)
            }
        }
    }
}

impl std::error::Error for ModelError {}

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    /// IDX header magic did not match the expected value.
    BadMagic { path: String, expected: u32, got: u32 },
    /// IDX payload ended before the header-declared size.
    Truncated { path: String, expected: usize, got: usize },
    /// Image and label files disagree on the item count.
    CountMismatch { images: usize, labels: usize },
    /// Requested more glyph classes than the alphabet can partition.
    AlphabetExceeded { requested: usize, available: usize },
    /// A class has fewer samples than a split or generator requires.
    InsufficientSamples { class: usize, have: usize, need: usize },
    Io { path: String, message: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::BadMagic { path, expected, got } => {
                write!(f, "{}: bad IDX magic {:#010x}, expected {:#010x}", path, got, expected)
            }
            DataError::Truncated { path, expected, got } => {
                write!(f, "{}: truncated IDX payload ({} bytes, header implies {})", path, got, expected)
            }
            DataError::CountMismatch { images, labels } => {
                write!(f, "image count {} does not match label count {}", images, labels)
            }
            DataError::AlphabetExceeded { requested, available } => {
                write!(f, "requested {} glyph classes but the alphabet has {}", requested, available)
            }
            DataError::InsufficientSamples { class, have, need } => {
                write!(f, "class {} has {} samples, {} required", class, have, need)
            }
            DataError::Io { path, message } => write!(f, "{}: {}", path, message),
        }
    }
}

impl std::error::Error for DataError {}
