//! Minimal reverse-mode differentiation engine and optimizer.

mod optim;
mod tape;
mod tensor;

pub use optim::{Adam, AdamConfig, LrDecay, Moments};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
