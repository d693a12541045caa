//! Continual-learning rehearsal with a Lipschitz-driven regularizer.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`tape`]: dense `f64` arrays and reverse-mode
//!   differentiation;
//! * [`backbone`]: bias-free ReLU MLP exposing every feature map;
//! * [`spectral`]: transmitting matrices, power iteration, Jacobi reference;
//! * [`lider`]: the two-term regularizer and its learnable targets;
//! * [`rehearsal`]: reservoir buffer and the ER / ER-ACE / DER++ / GDumb
//!   steps plus the Joint and Finetune bounds;
//! * [`benchmark`]: task streams, the training loop, FAA / FF;
//! * [`analysis`]: decision surfaces, FGSM, buffer guessing, weight noise.

pub mod analysis;
pub mod backbone;
pub mod benchmark;
pub mod error;
pub mod lider;
pub mod rehearsal;
pub mod seed;
pub mod spectral;
pub mod tape;
pub mod tensor;

pub use backbone::{ForwardTrace, MlpBackbone};
pub use error::{Error, Result};
pub use lider::{LiderConfig, LipschitzTargets, RegularizationTarget, TargetMode};
pub use tape::{sgd_step, Gradients, Tape, Var};
pub use tensor::Tensor;
