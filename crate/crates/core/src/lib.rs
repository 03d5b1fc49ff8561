//! Multi-label image classification with recurrent memorized attention.
//!
//! A convolutional backbone encodes the image once; an LSTM then walks a
//! fixed number of attentional regions over the feature map, each picked by
//! a constrained spatial transformer, and the per-region class scores are
//! fused by a category-wise max.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objective;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod trainer;
pub mod transform;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
pub use transform::TransformParams;
