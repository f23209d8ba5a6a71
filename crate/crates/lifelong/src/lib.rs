//! Lifelong teacher-student engine: a generative-replay teacher (earth-mover
//! adversarial training with a clipped critic) and a multi-latent VAE student
//! (continuous, class and domain latents with a domain-conditional prior),
//! trained sequentially over a task list, plus exact finite-instance
//! verification of the accompanying risk bounds.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod latents;
pub mod metrics;
pub mod nets;
pub mod replay;
pub mod student;
pub mod teacher;
pub mod theory;
