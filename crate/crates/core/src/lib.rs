pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dffn;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rrn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
