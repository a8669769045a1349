//! Visual inputs, the patch-transformer towers and their pretraining.

mod encoder;
mod input;
mod pretrain;

pub use encoder::*;
pub use input::*;
pub use pretrain::*;
