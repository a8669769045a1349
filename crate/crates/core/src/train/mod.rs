//! Model state, checkpoints and the staged training pipeline.

mod checkpoint;
mod pipeline;
mod stage;
mod state;

pub use checkpoint::*;
pub use pipeline::*;
pub use stage::*;
pub use state::*;
