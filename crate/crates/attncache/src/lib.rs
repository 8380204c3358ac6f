//! AttnCache: prefill acceleration by retrieving and reusing cached
//! self-attention maps.
//!
//! A toy decoder transformer captures post-softmax attention maps per
//! sentence; a Siamese-trained MLP projects pooled input embeddings to
//! feature vectors; an ANN index finds a stored sentence with similar
//! maps; a memory-mapped store serves those maps back without copying,
//! and the forward pass substitutes them so Q/K/rotary/softmax never run.

pub mod amstore;
pub mod bench;
pub mod engine;
pub mod error;
pub mod model;
pub mod projector;
pub mod tensor;
pub mod vecindex;

pub use error::{Error, Result};
