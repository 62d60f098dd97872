//! Reverse-mode automatic differentiation, MLPs, and Adam.
//!
//! Graphs are dynamic: a fresh [`Tape`] is built for every loss evaluation and
//! dropped afterwards. Only first-order adjoints are supported.

mod adam;
mod mlp;
mod tape;
mod tensor;
mod wnn;

use thiserror::Error;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use mlp::{Activation, Linear, Mlp};
pub(crate) use tape::sigmoid;
pub use tape::{grad, Gradients, Tape, Var};
pub use tensor::Tensor;
pub use wnn::{read_wnn, write_wnn, MAGIC as WNN_MAGIC};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite {0}, step rejected")]
    NonFinite(String),
    #[error("weight format: {0}")]
    Format(String),
}
