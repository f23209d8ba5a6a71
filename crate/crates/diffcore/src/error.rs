//! Error values for the differentiation substrate.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum DiffError {
    /// A function evaluation during finite differencing was not finite.
    NonFiniteEval { coordinate: usize, value: f64 },
    /// The tape produced no gradient for an input that requires one.
    NoGradient,
    /// An optimizer step found a parameter without a populated gradient.
    MissingGradient { param: String },
}

impl fmt::Display for DiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiffError::NonFiniteEval { coordinate, value } => write!(
                f,
                "non-finite evaluation ({}) while perturbing coordinate {}",
                value, coordinate
            ),
            DiffError::NoGradient => {
                write!(f, "tape produced no gradient for a requires-grad input")
            }
            DiffError::MissingGradient { param } => {
                write!(f, "parameter `{}` has no gradient", param)
            }
        }
    }
}

impl std::error::Error for DiffError {}
