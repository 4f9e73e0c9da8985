//! Minimal trainable network core.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod models;
pub mod network;
pub mod tensor;

pub use layers::{Cache, Conv2d, Dense, Dropout, FastfoodNode, Layer, MaxPool2d, Param};
pub use loss::{argmax_rows, softmax_xent};
pub use network::{LayerParams, Network, Sgd};
pub use tensor::Tensor;
