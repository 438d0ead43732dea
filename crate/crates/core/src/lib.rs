//! Content-enriched sequential recommendation by language modeling.
//!
//! Items are described by text. A frozen transformer, steered by learned
//! per-layer key/value prefixes (the knowledge prompt), encodes each item into
//! a vector; a user's history of such vectors attends over a learned domain
//! memory to produce per-user virtual input tokens (the reasoning prompt) for a
//! generator that writes the title of the next item. Generated titles are
//! mapped back to catalog items by max-pooled embedding cosine similarity.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod genmap;
pub mod knowledge;
pub mod numerics;
pub mod pipeline;
pub mod reasoning;
pub mod selftest;
pub mod synth;
pub mod textproc;
mod train;

pub use error::{Error, Result};
