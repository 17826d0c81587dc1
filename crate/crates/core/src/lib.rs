//! Classical-to-quantum knowledge distillation on a desk-sized simulator.
//!
//! A frozen convolutional teacher produces logits; a hybrid student
//! (reducer, quantum encoder, parameterized circuit, readout) is trained on
//! a blend of label cross-entropy and temperature-softened KL divergence to
//! the teacher.

pub mod checkpoint;
pub mod cnn;
pub mod data;
pub mod distill;
pub mod encode;
pub mod error;
pub mod experiment;
mod linalg;
pub mod qsim;
pub mod reduce;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
