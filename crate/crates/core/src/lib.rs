pub mod analysis;
pub mod autograd;
pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod hashing;
pub mod mechanism;
pub mod model;
pub mod ponder;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
