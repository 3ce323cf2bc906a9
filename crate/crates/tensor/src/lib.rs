//! Small deterministic tensor engine: dense `f64` arrays, image kernels
//! (convolution, bilinear warping, resampling, soft-argmax) and reverse-mode
//! differentiation over a recorded tape.

mod flow;
pub mod gradcheck;
pub mod init;
pub mod ops;
mod optim;
mod tape;
mod tensor;

pub use flow::FlowField;
pub use ops::{conv2d, soft_argmax, warp};
pub use optim::{Adam, AdamConfig};
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Domain(String),
    #[error("non-finite values produced by `{0}`")]
    NonFinite(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
