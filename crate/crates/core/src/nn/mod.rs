//! Minimal masked network engine.

mod arch;
pub mod conv;
mod model;
mod sgd;

pub use arch::{Architecture, LayerKind};
pub use model::{softmax, softmax_cross_entropy, BackwardOutput, BatchCapture, LayerCapture, LayerState, Model};
pub use sgd::Sgd;
