//! Vocabulary, projection and the decoder-only language model.

mod model;
mod vocab;

pub use model::*;
pub use vocab::*;
