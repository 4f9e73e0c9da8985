use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Cache, Layer, ParamVisitor};
use super::loss::softmax_xent;
use super::tensor::Tensor;
use crate::{Error, Real, Result};

/// Per-layer parameter summary row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    pub index: usize,
    pub kind: &'static str,
    pub learnable: usize,
    /// Stored weight scalars (Fastfood diagonals counted in both modes).
    pub weights: usize,
    pub output_shape: Vec<usize>,
}

/// Hyper-parameters of one SGD-with-momentum step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// An ordered stack of layers ending in class logits.
///
/// Shapes are validated once, at construction; the last layer must produce a
/// flat `(K)` vector consumed by softmax cross-entropy.
#[derive(Debug, Clone)]
pub struct Network<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    shapes: Vec<Vec<usize>>,
    caches: Vec<Option<Cache<T>>>,
    rng: ChaCha8Rng,
}

impl<T: Real> Network<T> {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<T>>, seed: u64) -> Result<Self> {
        let shapes = infer_shapes(&input_shape, &layers)?;
        let n = layers.len();
        Ok(Self {
            input_shape,
            layers,
            shapes,
            caches: vec![None; n],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s[0])
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Mutable access to a single layer; shapes cannot change through it.
    pub fn layer_mut(&mut self, index: usize) -> Option<&mut Layer<T>> {
        self.caches.iter_mut().for_each(|c| *c = None);
        self.layers.get_mut(index)
    }

    /// Output shape (without batch axis) of every layer.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Replaces layer `index` by `replacement` and revalidates every shape.
    pub fn splice(&mut self, index: usize, replacement: Vec<Layer<T>>) -> Result<()> {
        if index >= self.layers.len() {
            return Err(Error::dim(format!("no layer {index}")));
        }
        let mut layers = self.layers.clone();
        layers.splice(index..=index, replacement);
        let shapes = infer_shapes(&self.input_shape, &layers)?;
        self.caches = vec![None; layers.len()];
        self.layers = layers;
        self.shapes = shapes;
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.sample_shape() != self.input_shape.as_slice() {
            return Err(Error::dim(format!(
                "network expects samples of shape {:?}, got {:?}",
                self.input_shape,
                x.sample_shape()
            )));
        }
        Ok(())
    }

    /// Evaluation-mode logits. Takes `&self`, keeps no state.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, None)?.0;
            debug_assert!(h.is_finite(), "non-finite activation after {}", layer.kind());
        }
        Ok(h)
    }

    /// Training-mode logits; caches activations for [`backward`](Self::backward).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (layer, cache) in self.layers.iter().zip(self.caches.iter_mut()) {
            let (y, c) = layer.forward(&h, Some(&mut self.rng))?;
            debug_assert!(y.is_finite(), "non-finite activation after {}", layer.kind());
            *cache = Some(c);
            h = y;
        }
        Ok(h)
    }

    /// Backpropagates `∂E/∂logits` through the cached forward pass and
    /// stores every parameter gradient.
    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<()> {
        let mut grad = dlogits.clone();
        for i in (0..self.layers.len()).rev() {
            let cache = self.caches[i]
                .take()
                .ok_or_else(|| Error::State("backward called without a forward pass".into()))?;
            match self.layers[i].backward(&cache, &grad, i > 0)? {
                Some(dx) => grad = dx,
                None => break,
            }
        }
        Ok(())
    }

    /// One forward/backward pass on a labelled batch; returns the mean loss.
    pub fn train_step(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let logits = self.forward_train(x)?;
        let (loss, dlogits) = softmax_xent(&logits, labels)?;
        self.backward(&dlogits)?;
        Ok(loss)
    }

    /// `v ← μv − lr·(g + λw); w ← w + v` on every learnable array.
    pub fn sgd_step(&mut self, sgd: &Sgd) {
        let lr = T::from_f64_lossy(sgd.lr);
        let mu = T::from_f64_lossy(sgd.momentum);
        let wd = T::from_f64_lossy(sgd.weight_decay);
        self.visit_params(&mut |_, w, g, v| {
            for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = mu * *v - lr * (g + wd * *w);
                *w += *v;
            }
        });
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }

    /// Learnable scalars in the whole model.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Stored weight scalars (see [`Layer::weight_count`]).
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(Layer::weight_count).sum()
    }

    pub fn param_table(&self) -> Vec<LayerParams> {
        self.layers
            .iter()
            .zip(&self.shapes)
            .enumerate()
            .map(|(index, (l, s))| LayerParams {
                index,
                kind: l.kind(),
                learnable: l.param_count(),
                weights: l.weight_count(),
                output_shape: s.clone(),
            })
            .collect()
    }
}

fn infer_shapes<T: Real>(input: &[usize], layers: &[Layer<T>]) -> Result<Vec<Vec<usize>>> {
    if input.is_empty() || input.contains(&0) {
        return Err(Error::dim(format!("invalid network input shape {input:?}")));
    }
    let mut shapes = Vec::with_capacity(layers.len());
    let mut cur = input.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        cur = layer
            .output_shape(&cur)
            .map_err(|e| Error::dim(format!("layer {i} ({}): {e}", layer.kind())))?;
        shapes.push(cur.clone());
    }
    match shapes.last() {
        Some(s) if s.len() == 1 && s[0] >= 2 => Ok(shapes),
        Some(s) => Err(Error::dim(format!(
            "network must end in a flat logit vector with at least 2 classes, got {s:?}"
        ))),
        None => Err(Error::dim("network has no layers")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Dense, Dropout, MaxPool2d};
    use crate::nn::models::{deep_fried, lenet_reference, DeepFriedConfig};
    use rand::Rng;

    fn single_dense(w: Vec<f64>) -> Network<f64> {
        let dense = Dense::from_weights(2, 2, w, None).unwrap();
        Network::new(vec![2], vec![Layer::Dense(dense)], 0).unwrap()
    }

    #[test]
    fn rejects_ill_formed_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = |i, o, rng: &mut ChaCha8Rng| Layer::<f32>::Dense(Dense::new(i, o, rng).unwrap());
        assert!(Network::new(vec![4], vec![d(4, 3, &mut rng), d(2, 2, &mut rng)], 0).is_err());
        assert!(Network::new(vec![4], vec![d(4, 1, &mut rng)], 0).is_err());
        assert!(Network::<f32>::new(vec![4], Vec::new(), 0).is_err());
        assert!(Network::<f32>::new(vec![1, 4, 4], vec![Layer::MaxPool(MaxPool2d::new(2, 2).unwrap())], 0).is_err());
        assert!(Network::new(vec![0], vec![d(4, 3, &mut rng)], 0).is_err());
        assert!(Network::new(vec![4], vec![d(4, 3, &mut rng)], 0).is_ok());
    }

    #[test]
    fn rejects_wrong_input_shape_at_call_time() {
        let net = single_dense(vec![1.0, 0.0, 0.0, 1.0]);
        assert!(net.predict(&Tensor::zeros(vec![1, 3])).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut net = lenet_reference::<f32>(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![2, 1, 28, 28], (0..1568).map(|_| rng.random()).collect()).unwrap();
        net.train_step(&x, &[3, 7]).unwrap();
        let before = net.layers().to_vec();
        net.sgd_step(&Sgd {
            lr: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
        });
        assert_eq!(net.layers(), before.as_slice());
    }

    #[test]
    fn one_step_on_half_squared_norm() {
        let w = vec![1.0, -2.0, 0.5, 4.0];
        let mut net = single_dense(w.clone());
        // Gradient of ½‖w‖² is w itself.
        if let Some(Layer::Dense(d)) = net.layer_mut(0) {
            d.weight.grad = d.weight.value.clone();
        }
        net.sgd_step(&Sgd {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        });
        let Layer::Dense(d) = &net.layers()[0] else { unreachable!() };
        for (a, b) in d.weight.value.iter().zip(&w) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut net = single_dense(vec![0.0; 4]);
        let sgd = Sgd {
            lr: 1.0,
            momentum: 0.5,
            weight_decay: 0.0,
        };
        for _ in 0..2 {
            if let Some(Layer::Dense(d)) = net.layer_mut(0) {
                d.weight.grad = vec![1.0; 4];
            }
            net.sgd_step(&sgd);
        }
        let Layer::Dense(d) = &net.layers()[0] else { unreachable!() };
        // v1 = -1, w1 = -1; v2 = -1.5, w2 = -2.5
        assert_eq!(d.weight.value, vec![-2.5; 4]);
    }

    #[test]
    fn eval_mode_is_deterministic_with_dropout() {
        let cfg = DeepFriedConfig {
            n_features: 64,
            ..DeepFriedConfig::default()
        };
        let a = deep_fried::<f32>(&cfg, 11).unwrap();
        let b = deep_fried::<f32>(&cfg, 11).unwrap();
        assert!(a.layers().iter().any(|l| matches!(l, Layer::Dropout(Dropout { rate }) if *rate > 0.0)));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::new(vec![3, 1, 28, 28], (0..3 * 784).map(|_| rng.random()).collect()).unwrap();
        let ya = a.predict(&x).unwrap();
        assert_eq!(ya, a.predict(&x).unwrap());
        assert_eq!(ya, b.predict(&x).unwrap());
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = single_dense(vec![1.0; 4]);
        assert!(matches!(
            net.backward(&Tensor::zeros(vec![1, 2])),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn splice_revalidates_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = single_dense(vec![1.0; 4]);
        let bad = Layer::Dense(Dense::new(3, 2, &mut rng).unwrap());
        assert!(net.splice(0, vec![bad]).is_err());
        let pair = vec![
            Layer::Dense(Dense::new(2, 1, &mut rng).unwrap()),
            Layer::Dense(Dense::new(1, 2, &mut rng).unwrap()),
        ];
        net.splice(0, pair).unwrap();
        assert_eq!(net.shapes(), [vec![1], vec![2]]);
    }

    #[test]
    fn lenet_loss_decreases_on_a_fixed_batch() {
        let mut net = lenet_reference::<f32>(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::new(vec![64, 1, 28, 28], (0..64 * 784).map(|_| rng.random()).collect()).unwrap();
        let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
        let sgd = Sgd {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        };
        let first = net.train_step(&x, &labels).unwrap();
        net.sgd_step(&sgd);
        let mut last = first;
        for _ in 1..50 {
            last = net.train_step(&x, &labels).unwrap();
            net.sgd_step(&sgd);
        }
        assert!(last < 0.5 * first, "loss {first} -> {last}");
    }
}
