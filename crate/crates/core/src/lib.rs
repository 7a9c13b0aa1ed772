//! Image restoration with a residual-on-the-residual convolutional network
//! (enhancement attention modules with channel feature attention), built on
//! a small reverse-mode tensor engine.

pub mod data;
pub mod degrade;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Checkpoint, Model, ModelConfig, Task};
pub use tensor::{Shape, Tape, Tensor, Var};
