#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod classifier;
pub mod cli;
pub mod detect;
pub mod error;
pub mod eval;
pub mod gradcam;
pub mod heatmap;
pub mod iba;
pub mod optim;
pub mod pgm;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
