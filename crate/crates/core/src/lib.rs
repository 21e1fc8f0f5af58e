//! Kernel-inversed pyramidal resizing network (KIPRN) for pavement-distress
//! recognition, on top of a small reverse-mode autodiff tensor core.
//!
//! Pipeline: an input image is bilinearly resized into a pyramid, a learned
//! compensation is added to each level, and a shared-weight CNN classifies
//! the pyramid by summing per-level logits.

#[cfg(feature = "cli")]
pub mod cli;
pub mod classifier;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod resizer;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Element, Tensor};
