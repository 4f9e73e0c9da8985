//! Oracles shared by the integration suites.

#![allow(dead_code)]

use fastfood::fastfood::{dense_fastfood_matrix, FastfoodInit, FastfoodLayer};
use fastfood::nn::gradcheck::rel_err;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn uniform(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `max |a − b| / max |b|`.
pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs() / scale))
}

/// An adaptive layer with `d_pad = 2^k`, a random `d_in` that pads to it,
/// `n_out ≤ 2·d_pad`, and every diagonal redrawn away from its initial law
/// so the oracle sees generic parameters.
pub fn random_layer(max_log2: u32, rng: &mut ChaCha8Rng) -> FastfoodLayer<f64> {
    let k = rng.random_range(1..=max_log2);
    let d_pad = 1usize << k;
    let d_in = rng.random_range(d_pad / 2 + 1..=d_pad);
    let n_out = rng.random_range(1..=2 * d_pad);
    let init = FastfoodInit::with_sigma(rng.random_range(0.01..2.0));
    let mut layer = FastfoodLayer::init_adaptive(d_in, n_out, rng.random(), &init).unwrap();
    for block in layer.blocks_mut() {
        let [s, g, b] = block.diagonals_mut();
        for v in s.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        for v in g.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        for v in b.iter_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
    }
    layer
}

/// `Ŵ · pad(x)` from the materialised five-factor product.
pub fn oracle_forward(layer: &FastfoodLayer<f64>, x: &[f64], batch: usize) -> Vec<f64> {
    let w = dense_fastfood_matrix(layer).unwrap();
    let (d, d_in, n) = (layer.d_pad(), layer.d_in(), layer.n_out());
    let mut y = Vec::with_capacity(batch * n);
    for s in 0..batch {
        let xs = &x[s * d_in..(s + 1) * d_in];
        for r in 0..n {
            y.push(w[r * d..r * d + d_in].iter().zip(xs).map(|(a, b)| a * b).sum());
        }
    }
    y
}

fn probe(layer: &FastfoodLayer<f64>, x: &[f64], batch: usize, c: &[f64]) -> f64 {
    let y = layer.forward(x, batch).unwrap().0;
    y.iter().zip(c).map(|(a, b)| a * b).sum()
}

/// Worst relative error over every `dS, dG, dB, dx` coordinate of
/// `E = cᵀ forward(x)` against central differences with step `h`.
pub fn fastfood_gradcheck(layer: &FastfoodLayer<f64>, batch: usize, h: f64, floor: f64, rng: &mut ChaCha8Rng) -> f64 {
    let x = uniform(batch * layer.d_in(), -1.0, 1.0, rng);
    let c = uniform(batch * layer.n_out(), -1.0, 1.0, rng);
    let (_, ws) = layer.forward(&x, batch).unwrap();
    let g = layer.backward(&ws, &c).unwrap();
    let mut worst = 0.0f64;

    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += h;
        xm[i] -= h;
        let numeric = (probe(layer, &xp, batch, &c) - probe(layer, &xm, batch, &c)) / (2.0 * h);
        worst = worst.max(rel_err(g.dx[i], numeric, floor));
    }
    for (bi, bg) in g.blocks.iter().enumerate() {
        for (which, analytic) in [&bg.d_scale, &bg.d_gaussian, &bg.d_signs].into_iter().enumerate() {
            for (j, &a) in analytic.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut l = layer.clone();
                    l.blocks_mut()[bi].diagonals_mut()[which][j] += delta;
                    probe(&l, &x, batch, &c)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                worst = worst.max(rel_err(a, numeric, floor));
            }
        }
    }
    worst
}
