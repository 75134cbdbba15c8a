//! Tensors, seeded randomness, and reverse-mode differentiation.

pub mod kernels;
mod linalg;
mod rng;
mod tape;
mod tensor;

pub use linalg::{softmax_row, spectral_norm};
pub use rng::{gaussian_init, RngState, RngStream};
pub use tape::{grad, AttnSpec, Grads, Tape, Var};
pub use tensor::{dot, norm2, Precision, Tensor};
