//! Tape-based reverse-mode differentiation and the Adam optimizer.

mod nn;
mod optim;
mod tape;

pub use nn::{register_params, Activation, Dense, Mlp};
pub use optim::{cosine_lr, AdamConfig, AdamState, StepOutcome};
pub use tape::{Gradients, Tape, Var};

pub(crate) use tape::softplus;
