mod common;

use common::{fastfood_gradcheck, max_rel, oracle_forward, random_layer, uniform};
use fastfood::fastfood::{FastfoodInit, FastfoodLayer, Mode};
use fastfood::ops;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn forward_matches_dense_oracle_on_200_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..200 {
        let layer = random_layer(8, &mut rng);
        let batch = rng.random_range(1..=3);
        let x = uniform(batch * layer.d_in(), -1.0, 1.0, &mut rng);
        let y = layer.forward(&x, batch).unwrap().0;
        let err = max_rel(&y, &oracle_forward(&layer, &x, batch));
        assert!(err < 1e-9, "layer {i} (d_in {}, n_out {}): {err}", layer.d_in(), layer.n_out());
    }
}

#[test]
fn gradients_match_finite_differences_on_50_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..50 {
        let layer = random_layer(6, &mut rng);
        let err = fastfood_gradcheck(&layer, 2, 1e-5, 1e-6, &mut rng);
        assert!(err <= 1e-5, "instance {i}: {err}");
    }
}

#[test]
fn op_count_grows_as_n_log_d() {
    // Fixed n, growing d: the ratio between consecutive d approaches
    // (k+1)/k once the O(n) diagonal passes are small next to n·log d.
    let n = 4096;
    let count = |d: usize| {
        let layer = FastfoodLayer::<f64>::init_random(d, n, 1, &FastfoodInit::default()).unwrap();
        let x = vec![0.5; d];
        let ((), ops) = ops::measure(|| {
            layer.forward(&x, 1).unwrap();
        });
        assert_eq!(ops, layer.forward_op_count());
        ops as f64
    };
    for k in 8..12u32 {
        let ratio = count(1 << (k + 1)) / count(1 << k);
        let model = f64::from(k + 1) / f64::from(k);
        assert!((ratio / model - 1.0).abs() <= 0.1, "k={k}: {ratio} vs {model}");
    }
}

#[test]
fn padding_is_exactly_absorbed() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let layer = random_layer(7, &mut rng);
        let d = layer.d_pad();
        let padded = FastfoodLayer::from_blocks(d, layer.n_out(), Mode::Adaptive, layer.blocks().to_vec()).unwrap();
        let x = uniform(layer.d_in(), -1.0, 1.0, &mut rng);
        let mut xp = x.clone();
        xp.resize(d, 0.0);
        assert_eq!(layer.forward(&x, 1).unwrap().0, padded.forward(&xp, 1).unwrap().0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_adjoint_round_trips(seed in any::<u64>(), k in 1u32..=9) {
        let d = 1usize << k;
        let layer = FastfoodLayer::<f64>::init_random(d, d, seed, &FastfoodInit::default()).unwrap();
        let block = &layer.blocks()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = uniform(d, -1.0, 1.0, &mut rng);
        let (mut p, mut back) = (vec![0.0; d], vec![0.0; d]);
        block.permute(&v, &mut p);
        block.permute_adjoint(&p, &mut back);
        prop_assert_eq!(back, v);
    }

    #[test]
    fn batched_forward_equals_per_sample(seed in any::<u64>(), batch in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_layer(5, &mut rng);
        let x = uniform(batch * layer.d_in(), -1.0, 1.0, &mut rng);
        let all = layer.forward(&x, batch).unwrap().0;
        for s in 0..batch {
            let one = layer.forward(&x[s * layer.d_in()..(s + 1) * layer.d_in()], 1).unwrap().0;
            prop_assert_eq!(&all[s * layer.n_out()..(s + 1) * layer.n_out()], one.as_slice());
        }
    }
}
