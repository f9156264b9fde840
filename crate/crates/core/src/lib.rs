//! Relation-aware image captioning: region graphs (semantic and spatial),
//! a gated graph convolution encoder, a two-layer attention LSTM decoder,
//! late fusion of the two branches, and the tooling around them.

pub mod bleu;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gcn;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod model;
pub mod optim;
pub mod params;
pub mod scene;
pub mod semantic;
pub mod spatial;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
