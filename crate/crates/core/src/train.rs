//! Minibatch SGD training and evaluation loops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{shuffled_indices, Dataset};
use crate::nn::{argmax_rows, Network, Sgd};
use crate::{Error, Real, Result};

/// Learning-rate schedule as a function of the global iteration count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrPolicy {
    Fixed,
    /// `lr · (1 + γ·iter)^(−power)`
    Inv { gamma: f64, power: f64 },
}

impl LrPolicy {
    pub fn rate(&self, base: f64, iter: u64) -> f64 {
        match *self {
            LrPolicy::Fixed => base,
            LrPolicy::Inv { gamma, power } => base * (1.0 + gamma * iter as f64).powf(-power),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_policy: LrPolicy,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    /// The Caffe LeNet solver: lr 0.01, momentum 0.9, weight decay 5e-4,
    /// `inv` decay with γ = 1e-4 and power 0.75, batch 64.
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_policy: LrPolicy::Inv {
                gamma: 1e-4,
                power: 0.75,
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be finite and non-negative"));
        }
        if let LrPolicy::Inv { gamma, power } = self.lr_policy {
            if !(gamma >= 0.0 && power >= 0.0 && gamma.is_finite() && power.is_finite()) {
                return Err(Error::config("lr_decay", "gamma and power must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f64,
    /// Error rate on the held-out set, if one was given.
    pub val_error: Option<f64>,
}

/// Trainer state that survives across calls, so a run can be resumed or
/// fine-tuned with a continuing schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub iteration: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            iteration: 0,
            rng,
        })
    }

    /// One pass over `train` in a freshly shuffled order; returns the mean loss.
    pub fn epoch<T: Real>(&mut self, net: &mut Network<T>, train: &Dataset) -> Result<f64> {
        check_compatible(net, train)?;
        let order = shuffled_indices(train.len(), &mut self.rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let (x, y) = train.batch(chunk);
            let loss = net.train_step(&x.cast::<T>(), &y)?.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at iteration {}", self.iteration)));
            }
            let c = &self.config;
            net.sgd_step(&Sgd {
                lr: c.lr_policy.rate(c.lr, self.iteration),
                momentum: c.momentum,
                weight_decay: c.weight_decay,
            });
            self.iteration += 1;
            total += loss;
            batches += 1;
        }
        Ok(total / batches.max(1) as f64)
    }

    /// Runs `config.epochs` epochs, evaluating on `val` after each one and
    /// reporting metrics through `on_epoch`.
    pub fn fit<T: Real>(
        &mut self,
        net: &mut Network<T>,
        train: &Dataset,
        val: Option<&Dataset>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::with_capacity(self.config.epochs);
        for epoch in 1..=self.config.epochs {
            let train_loss = self.epoch(net, train)?;
            let val_error = val.map(|v| error_rate(net, v, 500)).transpose()?;
            let m = EpochMetrics {
                epoch,
                train_loss,
                val_error,
            };
            on_epoch(&m);
            out.push(m);
        }
        Ok(out)
    }
}

fn check_compatible<T: Real>(net: &Network<T>, data: &Dataset) -> Result<()> {
    if data.sample_shape() != net.input_shape() {
        return Err(Error::dim(format!(
            "dataset samples have shape {:?}, network expects {:?}",
            data.sample_shape(),
            net.input_shape()
        )));
    }
    if data.classes > net.num_classes() {
        return Err(Error::dim(format!(
            "{} classes in data, network has {} outputs",
            data.classes,
            net.num_classes()
        )));
    }
    if data.is_empty() {
        return Err(Error::dim("empty dataset"));
    }
    Ok(())
}

/// Evaluation-mode predicted class for every sample.
pub fn predict_labels<T: Real>(net: &Network<T>, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    check_compatible(net, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk);
        out.extend(argmax_rows(&net.predict(&x.cast::<T>())?));
    }
    Ok(out)
}

/// Fraction of misclassified samples, in `[0, 1]`.
pub fn error_rate<T: Real>(net: &Network<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let pred = predict_labels(net, data, batch_size)?;
    let wrong = pred.iter().zip(&data.labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussian_blobs;
    use crate::nn::{Dense, Layer};

    fn linear(d: usize, k: usize, seed: u64) -> Network<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::new(vec![d], vec![Layer::Dense(Dense::new(d, k, &mut rng).unwrap())], seed).unwrap()
    }

    #[test]
    fn inv_policy_matches_formula() {
        let p = LrPolicy::Inv {
            gamma: 1e-4,
            power: 0.75,
        };
        assert_eq!(p.rate(0.01, 0), 0.01);
        assert!((p.rate(0.01, 10_000) - 0.01 * 2f64.powf(-0.75)).abs() < 1e-15);
        assert_eq!(LrPolicy::Fixed.rate(0.3, 99), 0.3);
    }

    #[test]
    fn rejects_invalid_configs() {
        let bad = [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { lr: f64::NAN, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(Trainer::new(cfg), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn linear_classifier_separates_distant_blobs() {
        let data = synth_gaussian_blobs(400, 5, 4, 10.0, 1).unwrap();
        let mut net = linear(5, 4, 2);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(cfg).unwrap();
        let metrics = trainer.fit(&mut net, &data, Some(&data), |_| {}).unwrap();
        assert_eq!(metrics.len(), 5);
        assert!(metrics[4].train_loss < metrics[0].train_loss);
        assert_eq!(error_rate(&net, &data, 64).unwrap(), 0.0);
        assert_eq!(trainer.iteration, 5 * 25);
    }

    #[test]
    fn training_is_deterministic() {
        let data = synth_gaussian_blobs(200, 3, 3, 4.0, 7).unwrap();
        let run = || {
            let mut net = linear(3, 3, 5);
            let mut t = Trainer::new(TrainConfig {
                epochs: 2,
                seed: 3,
                ..TrainConfig::default()
            })
            .unwrap();
            (t.fit(&mut net, &data, Some(&data), |_| {}).unwrap(), net.layers().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let data = synth_gaussian_blobs(10, 3, 2, 4.0, 0).unwrap();
        let net = linear(4, 2, 0);
        assert!(matches!(error_rate(&net, &data, 4), Err(Error::Dimension(_))));
    }
}
