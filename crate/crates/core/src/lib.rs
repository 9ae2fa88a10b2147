//! Dual feature equalization network for 2D segmentation, with a small
//! reverse-mode autodiff engine underneath.

pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod decoder;
pub mod dft1;
pub mod equalization;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod nn;
pub mod optim;
mod ops;
pub mod parallel;
pub mod params;
pub mod swin;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result, TensorError};
pub use ops::concat;
pub use params::{Binder, GradBuffer, ParamId, ParamStore};
pub use tensor::Tensor;
