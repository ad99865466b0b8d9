//! One-stage 3D nodule detection with a squeeze-and-excitation
//! encoder-decoder region proposal network.

pub mod boxes;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
