pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod kernels;
pub mod model;
pub mod steering;
pub mod sweep;
pub mod tensor;
pub mod training;
pub mod topk;

pub use error::{Error, Result};
pub use tensor::Tensor;
