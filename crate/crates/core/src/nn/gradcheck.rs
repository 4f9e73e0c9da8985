//! Central finite-difference verification of network gradients.
//!
//! The numeric side only ever evaluates the loss (in evaluation mode), so it
//! shares nothing with the backward pass it checks. Use it on networks
//! without active dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv2d, Dense, FastfoodNode, Layer, MaxPool2d};
use super::loss::softmax_xent;
use super::network::Network;
use super::tensor::Tensor;
use crate::fastfood::{FastfoodInit, FastfoodLayer};
use crate::Result;

/// `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps gradients that are zero up to finite-difference noise
/// from dominating the maximum.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub array: usize,
    pub name: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Worst>,
}

fn perturb(net: &mut Network<f64>, array: usize, element: usize, delta: f64) {
    let mut idx = 0;
    net.visit_params(&mut |_, w, _, _| {
        if idx == array {
            w[element] += delta;
        }
        idx += 1;
    });
}

fn loss(net: &Network<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    Ok(softmax_xent(&net.predict(x)?, labels)?.0)
}

/// Compares every learnable scalar's analytic gradient of the mean
/// cross-entropy against `(E(w+h) − E(w−h)) / 2h`.
pub fn check_network(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    net.train_step(x, labels)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    net.visit_params(&mut |name, _, g, _| analytic.push((name.to_string(), g.to_vec())));

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (a, (name, grads)) in analytic.iter().enumerate() {
        for (j, &g) in grads.iter().enumerate() {
            perturb(net, a, j, step);
            let plus = loss(net, x, labels)?;
            perturb(net, a, j, -2.0 * step);
            let minus = loss(net, x, labels)?;
            perturb(net, a, j, step);
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_err(g, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(Worst {
                    array: a,
                    name: name.clone(),
                    element: j,
                    analytic: g,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// A small network touching every trainable layer kind:
/// `conv 2×2×2 → maxpool 2 → fastfood 12→16 → relu → dense 16→3`, on
/// `1×5×7` input. Returns the network with a 2-sample batch and labels.
///
/// Biases and Fastfood diagonals are drawn away from zero so no ReLU input
/// or pooling tie sits near a kink.
pub fn tiny_network(seed: u64) -> Result<(Network<f64>, Tensor<f64>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = Conv2d::new(1, 2, 2, 1, 0, &mut rng)?;
    conv.bias.value = vec![0.1, -0.2];
    let ff = FastfoodLayer::init_adaptive(12, 16, rng.random(), &FastfoodInit::default())?;
    let mut dense = Dense::new(16, 3, &mut rng)?;
    if let Some(b) = &mut dense.bias {
        b.value = vec![0.05, -0.1, 0.2];
    }
    let layers = vec![
        Layer::Conv(conv),
        Layer::MaxPool(MaxPool2d::new(2, 2)?),
        Layer::Fastfood(FastfoodNode::new(ff)),
        Layer::Relu,
        Layer::Dense(dense),
    ];
    let net = Network::new(vec![1, 5, 7], layers, seed)?;
    let x: Vec<f64> = (0..70).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok((net, Tensor::new(vec![2, 1, 5, 7], x)?, vec![1, 2]))
}
