//! Dense tensors, a reverse-mode tape and a reproducible random stream.

pub mod linalg;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use rng::RngStream;
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;
