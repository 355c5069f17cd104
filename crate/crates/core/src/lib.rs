//! partial build check
pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod degrade;
pub mod error;
pub mod imaging;
pub mod mib;
pub mod nn;
pub mod optim;
pub mod seeds;
pub mod tensor;
pub mod toydata;
pub mod vae;

pub use error::{Error, Result};
pub use imaging::Image;
pub use tensor::Tensor;
