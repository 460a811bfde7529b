#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod data;
pub mod error;
pub mod factorize;
pub mod model;
pub mod mpo;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{relative_error, truncated_svd, SvdResult, Tensor};
