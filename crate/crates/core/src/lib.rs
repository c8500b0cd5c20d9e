//! Multimodal sequence classification at desk scale.
//!
//! Two model families over precomputed per-step embeddings:
//!
//! * a micro-gesture classifier that fuses RGB and pose token streams with
//!   bidirectional cross-attention, pools over time, and optionally refines
//!   pooled features against a per-class memory of past confident examples;
//! * a binary emotion classifier that runs context and face streams through
//!   pre-norm transformer encoders joined by learned sigmoid gates.
//!
//! Everything computes in `f64` on a small reverse-mode tape ([`graph`]) so
//! every gradient path can be validated against central differences.

pub mod checkpoint;
pub mod data;
pub mod emotion;
pub mod error;
pub mod gesture;
pub mod gradcheck;
pub mod graph;
pub mod memory;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
