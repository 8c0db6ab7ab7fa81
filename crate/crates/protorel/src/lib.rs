//! Few-shot relation classification between pairs of tagged entities.
//!
//! The model encodes a sentence with word plus head/tail position embeddings
//! through a convolutional sentence encoder, classifies queries by distance to
//! class prototypes built from a handful of support sentences, and trains
//! episodically with a throwaway support classifier that is updated fast while
//! the encoder is updated slowly. A dictionary-alignment pipeline turns raw
//! corpora into candidate instances for new domains.

pub mod align;
pub mod classifier;
pub mod data;
pub mod encoder;
pub mod matching;
pub mod numerics;
pub mod synthetic;
pub mod trainer;

pub use numerics::{Graph, NodeId, Tensor, TensorError};
