//! Minimal dense-tensor math with tape-based reverse-mode automatic
//! differentiation.
//!
//! Values are 64-bit floats stored row-major. A [`Tape`] records every
//! operation applied to [`Var`] handles; [`Tape::backward`] walks the
//! recording in reverse and accumulates gradients on every leaf that was
//! registered with `requires_grad`.

mod error;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::TensorError;
pub use optim::{Adafactor, AdafactorConfig, Adam, AdamConfig, Optimizer, OptimizerState};
pub use params::{Bindings, GradStore, ParamStore, TensorRecord, CHECKPOINT_FORMAT_VERSION};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;
