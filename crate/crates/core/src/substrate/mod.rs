//! Numeric substrate: dense tensors, reverse-mode differentiation, a Jacobi
//! symmetric eigensolver, and seeded deterministic randomness.

pub mod eig;
pub mod gradcheck;
pub mod linalg;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use eig::sym_eig;
pub use gradcheck::grad_check;
pub use rng::RngStream;
pub use tape::{NodeId, Tape};
pub use tensor::{Scalar, Tensor};
