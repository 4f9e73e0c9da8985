//! Experiment configuration: one JSON file, every field optional, with
//! command-line flags applied on top.

use std::path::{Path, PathBuf};

use fastfood::fastfood::{FastfoodInit, Mode, ScaleInit};
use fastfood::nn::models::DeepFriedConfig;
use fastfood::train::{LrPolicy, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "FASTFOOD_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LenetRef,
    Deepfried,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Random,
    Adaptive,
}

impl From<ModeName> for Mode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Random => Mode::Random,
            ModeName::Adaptive => Mode::Adaptive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleName {
    Chi,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FastfoodSection {
    pub n_features: usize,
    pub mode: ModeName,
    pub sigma: f64,
    pub scale: ScaleName,
    pub dropout_pi: f64,
    pub dropout_s: f64,
    /// ReLU after the transform.
    pub relu: bool,
    /// Dropout rate after the nonlinearity.
    pub dropout: f64,
}

impl Default for FastfoodSection {
    fn default() -> Self {
        Self {
            n_features: 1024,
            mode: ModeName::Adaptive,
            sigma: 0.05,
            scale: ScaleName::Chi,
            dropout_pi: 0.0,
            dropout_s: 0.0,
            relu: true,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrDecay {
    Fixed,
    Inv { gamma: f64, power: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_decay: LrDecay,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 10,
            batch_size: 64,
            lr_decay: LrDecay::Inv {
                gamma: 1e-4,
                power: 0.75,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory with the MNIST IDX files; falls back to `FASTFOOD_DATA_DIR`.
    pub dir: Option<PathBuf>,
    /// Trailing training images held out for validation.
    pub val_size: usize,
    /// Use only the first `train_limit` training images (before the split).
    pub train_limit: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: None,
            val_size: fastfood::data::MNIST_VAL_SIZE,
            train_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub n_features: Vec<usize>,
    /// Seeds per feature count, starting at the top-level seed.
    pub seeds: usize,
    pub pairs: usize,
    pub dim: usize,
    pub lengthscale: f64,
    /// Standard deviation of the random point coordinates.
    pub point_std: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            n_features: vec![256, 1024, 4096],
            seeds: 1,
            pairs: 100,
            dim: 16,
            lengthscale: 1.0,
            point_std: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub dims: Vec<usize>,
    pub reps: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            dims: vec![256, 512, 1024, 2048, 4096],
            reps: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressSection {
    /// Dense layer to factor; the first dense layer when absent.
    pub layer: Option<usize>,
    /// Rank; half of `min(d_in, d_out)` when absent.
    pub k: Option<usize>,
    /// Fine-tuning epochs after the replacement (needs data).
    pub fine_tune_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub fastfood: FastfoodSection,
    pub optimizer: OptimizerSection,
    pub seed: u64,
    pub data: DataSection,
    pub kernel: KernelSection,
    pub bench: BenchSection,
    pub compress: CompressSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Deepfried,
            fastfood: FastfoodSection::default(),
            optimizer: OptimizerSection::default(),
            seed: 0,
            data: DataSection::default(),
            kernel: KernelSection::default(),
            bench: BenchSection::default(),
            compress: CompressSection::default(),
        }
    }
}

fn bad(field: &str, reason: impl Into<String>) -> CliError {
    CliError::Config(format!("`{field}`: {}", reason.into()))
}

fn rate(field: &str, p: f64) -> Result<(), CliError> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(bad(field, format!("rate {p} outside [0, 1)")))
    }
}

fn positive(field: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        Err(bad(field, "must be positive"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let f = &self.fastfood;
        positive("fastfood.n_features", f.n_features)?;
        if !(f.sigma.is_finite() && f.sigma > 0.0) {
            return Err(bad("fastfood.sigma", "must be positive"));
        }
        rate("fastfood.dropout_pi", f.dropout_pi)?;
        rate("fastfood.dropout_s", f.dropout_s)?;
        rate("fastfood.dropout", f.dropout)?;
        let o = &self.optimizer;
        positive("optimizer.epochs", o.epochs)?;
        positive("optimizer.batch_size", o.batch_size)?;
        if !(o.lr.is_finite() && o.lr >= 0.0) {
            return Err(bad("optimizer.lr", "must be finite and non-negative"));
        }
        rate("optimizer.momentum", o.momentum)?;
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return Err(bad("optimizer.weight_decay", "must be finite and non-negative"));
        }
        if let LrDecay::Inv { gamma, power } = o.lr_decay {
            if !(gamma.is_finite() && gamma >= 0.0 && power.is_finite() && power >= 0.0) {
                return Err(bad("optimizer.lr_decay", "gamma and power must be non-negative"));
            }
        }
        if self.data.train_limit == Some(0) {
            return Err(bad("data.train_limit", "must be positive"));
        }
        let k = &self.kernel;
        if k.n_features.is_empty() || k.n_features.contains(&0) {
            return Err(bad("kernel.n_features", "need at least one positive count"));
        }
        positive("kernel.seeds", k.seeds)?;
        positive("kernel.pairs", k.pairs)?;
        positive("kernel.dim", k.dim)?;
        if !(k.lengthscale.is_finite() && k.lengthscale > 0.0) {
            return Err(bad("kernel.lengthscale", "must be positive"));
        }
        if !(k.point_std.is_finite() && k.point_std > 0.0) {
            return Err(bad("kernel.point_std", "must be positive"));
        }
        if let Some(&d) = self.bench.dims.iter().find(|d| !d.is_power_of_two()) {
            return Err(bad("bench.dims", format!("{d} is not a power of two")));
        }
        if self.bench.dims.is_empty() {
            return Err(bad("bench.dims", "empty"));
        }
        positive("bench.reps", self.bench.reps)?;
        if self.compress.k == Some(0) {
            return Err(bad("compress.k", "must be positive"));
        }
        Ok(())
    }

    pub fn deep_fried(&self) -> DeepFriedConfig {
        let f = &self.fastfood;
        DeepFriedConfig {
            n_features: f.n_features,
            mode: f.mode.into(),
            init: FastfoodInit {
                sigma: f.sigma,
                scale: match f.scale {
                    ScaleName::Chi => ScaleInit::Chi,
                    ScaleName::Flat => ScaleInit::Flat,
                },
                dropout_pi: f.dropout_pi,
                dropout_s: f.dropout_s,
            },
            relu: f.relu,
            dropout: f.dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let o = &self.optimizer;
        TrainConfig {
            epochs: o.epochs,
            batch_size: o.batch_size,
            lr: o.lr,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            lr_policy: match o.lr_decay {
                LrDecay::Fixed => LrPolicy::Fixed,
                LrDecay::Inv { gamma, power } => LrPolicy::Inv { gamma, power },
            },
            seed: self.seed,
        }
    }

    /// Flag, then config file, then `FASTFOOD_DATA_DIR`.
    pub fn data_dir(&self) -> Result<PathBuf, CliError> {
        self.data
            .dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| CliError::Data(format!("no data directory: pass --data-dir, set data.dir, or export {DATA_DIR_ENV}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
        assert_eq!(c.train_config(), TrainConfig::default());
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let c: ExperimentConfig = serde_json::from_str(
            r#"{"model": "lenet_ref", "fastfood": {"mode": "random"}, "optimizer": {"lr_decay": {"policy": "fixed"}}}"#,
        )
        .unwrap();
        assert_eq!(c.model, ModelKind::LenetRef);
        assert_eq!(c.fastfood.mode, ModeName::Random);
        assert_eq!(c.fastfood.n_features, 1024);
        assert_eq!(c.train_config().lr_policy, LrPolicy::Fixed);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"fastfod": {}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"fastfood": {"sigmaa": 1}}"#).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = ExperimentConfig::default();
        c.fastfood.dropout_s = 1.0;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("fastfood.dropout_s"), "{msg}");
        let mut c = ExperimentConfig::default();
        c.bench.dims = vec![300];
        assert!(c.validate().unwrap_err().to_string().contains("bench.dims"));
    }
}
