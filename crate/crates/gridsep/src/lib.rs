//! TF-GridNet speaker separation: tensors and reverse-mode autodiff, the
//! STFT front end, the model, its objectives, a synthetic corpus, and the
//! training loop. The companion `gridsep` binary drives everything.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod scalar;
pub mod stft;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod wav;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
