//! Retraining-free compression of convolutional and fully connected
//! networks: activation-based filter pruning followed by coreset
//! factorization of every layer's weight matrix, with optional k-means
//! quantization and canonical Huffman packing.

pub mod cli;
pub mod codec;
pub mod container;
pub mod coreset;
pub mod decomp;
pub mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
