pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod lm;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
