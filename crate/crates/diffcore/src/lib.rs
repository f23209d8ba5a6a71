//! Deterministic differentiable-computation substrate: dense f64 tensors,
//! a reverse-mode tape over a fixed primitive set, a named parameter store
//! with Adam, and a finite-difference gradient oracle.
//!
//! Single-threaded by design: tapes and stores are mutated only by their
//! owner, tensors are plain data and freely shareable once built.

mod error;
mod gradcheck;
mod rng;
mod store;
mod tape;
mod tensor;

pub use error::DiffError;
pub use gradcheck::{
    check_gradients, check_store_gradients, finite_difference_gradient, rel_err, GradCheckReport,
};
pub use rng::Rng;
pub use store::{BoundParams, ParamStore, ADAM_BETA_M, ADAM_BETA_V, ADAM_EPS};
pub use tape::{Tape, ValueId};
pub use tensor::Tensor;
