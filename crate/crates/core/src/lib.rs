//! Training and deployment library for low-precision policy distillation:
//! a full-precision DDQN teacher learns a pixel game, a constrained student
//! (ternary weights, binary activations, bounded fan-in) is distilled from
//! its Q-values, and the trained student folds into an integer-only network
//! that matches the float inference path bit for bit.

pub mod batchnorm;
pub mod bin_io;
pub mod conv;
pub mod deploy;
pub mod distill;
pub mod env;
pub mod error;
pub mod lowprec;
pub mod netspec;
pub mod rng;
pub mod scalar;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// The precision every training-path computation runs in.
pub type Real = f64;
pub type Tensor = tensor::TensorBase<Real>;
