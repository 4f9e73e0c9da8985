//! Adaptive Fastfood layers and the machinery around them.
//!
//! The crate is organised bottom-up:
//!
//! * [`fwht`]: in-place fast Walsh-Hadamard transform (unnormalized) and a
//!   dense oracle.
//! * [`fastfood`]: the `S H G Π H B` operator with storage, forward, analytic
//!   backward, random and adaptive initialisation, stacking for `n > d`.
//! * [`nn`]: a minimal trainable network core (conv, pool, dense, Fastfood,
//!   ReLU, dropout, softmax cross-entropy, SGD with momentum) and the LeNet /
//!   deep fried model builders.
//! * [`kernels`]: random-feature approximations of the RBF and arc-cosine
//!   kernels, with dense-Gaussian and Fastfood projectors.
//! * [`compress`]: truncated SVD of dense weights and low-rank layer
//!   replacement.
//! * [`data`]: IDX (MNIST) loading and synthetic datasets.
//! * [`train`]: minibatch training and evaluation loops.
//! * [`ops`]: the thread-local arithmetic operation counter used by the cost
//!   model benchmarks.

pub mod compress;
pub mod data;
pub mod error;
pub mod fastfood;
pub mod fwht;
pub mod kernels;
pub mod nn;
pub mod ops;
pub mod real;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
