pub mod autodiff;
pub mod csq;
pub mod diagnostics;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod manifest;
pub mod mlcnn;
pub mod network;
pub mod pdc;
pub mod tensor;

pub use error::{PcqError, Result};
pub use tensor::{Scalar, Tensor};
