//! Conversations, the glyph-world corpus, batching and file formats.

mod conversation;
mod corpus;
pub mod glyph;
mod payload;
mod sampler;

pub use conversation::*;
pub use corpus::*;
pub use payload::*;
pub use sampler::*;
