//! Reference LeNet and its deep fried counterpart.
//!
//! Both share the Caffe LeNet feature extractor
//! `conv 20×5×5 → maxpool 2 → conv 50×5×5 → maxpool 2` on `1×28×28` input,
//! which leaves `50×4×4 = 800` features. The reference continues with
//! `dense 800→500 → relu → dense 500→10`; the deep fried model replaces the
//! hidden dense layer with `fastfood 800→n → relu [→ dropout]` before the
//! `dense n→10` softmax layer.
//!
//! Learnable scalars, counting biases:
//!
//! | layer        | reference | deep fried 1024 | deep fried 2048 |
//! |--------------|----------:|----------------:|----------------:|
//! | conv1        |       520 |             520 |             520 |
//! | conv2        |    25,050 |          25,050 |          25,050 |
//! | hidden       |   400,500 |           3,072 |           6,144 |
//! | softmax      |     5,010 |          10,250 |          20,490 |
//! | **total**    |   431,080 |          38,892 |          52,204 |

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv2d, Dense, Dropout, FastfoodNode, Layer, MaxPool2d};
use super::network::Network;
use crate::fastfood::{FastfoodInit, FastfoodLayer, Mode};
use crate::{Real, Result};

pub const MNIST_SHAPE: [usize; 3] = [1, 28, 28];
pub const MNIST_CLASSES: usize = 10;
/// Width of the LeNet feature extractor output.
pub const LENET_FEATURES: usize = 800;

#[derive(Debug, Clone, PartialEq)]
pub struct DeepFriedConfig {
    pub n_features: usize,
    pub mode: Mode,
    pub init: FastfoodInit,
    /// Apply a ReLU after the Fastfood transform.
    pub relu: bool,
    /// Dropout rate after the nonlinearity (0 disables the layer).
    pub dropout: f64,
}

impl Default for DeepFriedConfig {
    fn default() -> Self {
        Self {
            n_features: 1024,
            mode: Mode::Adaptive,
            init: FastfoodInit::with_sigma(0.05),
            relu: true,
            dropout: 0.5,
        }
    }
}

fn features<T: Real>(rng: &mut dyn RngCore) -> Result<Vec<Layer<T>>> {
    Ok(vec![
        Layer::Conv(Conv2d::new(1, 20, 5, 1, 0, rng)?),
        Layer::MaxPool(MaxPool2d::new(2, 2)?),
        Layer::Conv(Conv2d::new(20, 50, 5, 1, 0, rng)?),
        Layer::MaxPool(MaxPool2d::new(2, 2)?),
    ])
}

/// Caffe-style LeNet with Xavier-initialised weights and zero biases.
pub fn lenet_reference<T: Real>(seed: u64) -> Result<Network<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = features(&mut rng)?;
    layers.push(Layer::Dense(Dense::new(LENET_FEATURES, 500, &mut rng)?));
    layers.push(Layer::Relu);
    layers.push(Layer::Dense(Dense::new(500, MNIST_CLASSES, &mut rng)?));
    Network::new(MNIST_SHAPE.to_vec(), layers, seed ^ 0x5eed)
}

/// LeNet with its hidden fully connected layer replaced by Fastfood.
pub fn deep_fried<T: Real>(cfg: &DeepFriedConfig, seed: u64) -> Result<Network<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = features(&mut rng)?;
    let ff_seed = rng.next_u64();
    let ff = match cfg.mode {
        Mode::Adaptive => FastfoodLayer::init_adaptive(LENET_FEATURES, cfg.n_features, ff_seed, &cfg.init)?,
        Mode::Random => FastfoodLayer::init_random(LENET_FEATURES, cfg.n_features, ff_seed, &cfg.init)?,
    };
    layers.push(Layer::Fastfood(FastfoodNode::new(ff)));
    if cfg.relu {
        layers.push(Layer::Relu);
    }
    if cfg.dropout > 0.0 {
        layers.push(Layer::Dropout(Dropout::new(cfg.dropout)?));
    }
    layers.push(Layer::Dense(Dense::new(cfg.n_features, MNIST_CLASSES, &mut rng)?));
    Network::new(MNIST_SHAPE.to_vec(), layers, seed ^ 0x5eed)
}
