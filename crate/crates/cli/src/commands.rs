//! Subcommand implementations. Each returns its results as well as writing
//! them, so the drivers can be tested without parsing output files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fastfood::compress::{replace_dense_with_lowrank, CompressionReport};
use fastfood::data::{Dataset, Mnist};
use fastfood::fastfood::{FastfoodInit, FastfoodLayer};
use fastfood::kernels::{kernel_error, random_pairs, FeatureMap, Projector};
use fastfood::nn::models::{deep_fried, lenet_reference};
use fastfood::nn::{Layer, LayerParams, Network};
use fastfood::train::{error_rate, EpochMetrics, Trainer};
use fastfood::ops;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use crate::checkpoint;
use crate::config::{ExperimentConfig, ModeName, ModelKind};
use crate::{BenchArgs, CliError, CompressArgs, EvalArgs, KernelArgs, ModeArg, ModelArg, Split, TrainArgs};

pub const METRICS_HEADER: &str = "epoch,train_loss,val_error";
pub const BENCH_HEADER: &str = "d,dense_ns,fastfood_ns,dense_ops,fastfood_ops";
pub const KERNEL_HEADER: &str = "n_features,seed,rmse_rbf_dense,rmse_rbf_fastfood";
pub const COMPRESS_HEADER: &str = "layer,k,params_before,params_after,fro_error";

pub const MODEL_FILE: &str = "model.ffck";
pub const COMPRESSED_FILE: &str = "compressed.ffck";

/// Batch size used for evaluation passes.
const EVAL_BATCH: usize = 500;

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Builds the untrained model the config describes.
pub fn build_model(cfg: &ExperimentConfig) -> Result<Network<f32>, CliError> {
    cfg.validate()?;
    Ok(match cfg.model {
        ModelKind::LenetRef => lenet_reference(cfg.seed)?,
        ModelKind::Deepfried => deep_fried(&cfg.deep_fried(), cfg.seed)?,
    })
}

/// The three MNIST splits after `data.train_limit` and `data.val_size`.
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits, CliError> {
    let dir = cfg.data_dir()?;
    let mnist = Mnist::load(&dir)?;
    let mut train = mnist.train;
    if let Some(limit) = cfg.data.train_limit {
        let n = limit.min(train.len());
        train = train.subset(&(0..n).collect::<Vec<_>>());
    }
    let val_size = cfg.data.val_size;
    if val_size >= train.len() {
        return Err(CliError::Config(format!(
            "`data.val_size`: {val_size} leaves no training images out of {}",
            train.len()
        )));
    }
    let (train, val) = if val_size == 0 {
        (train, None)
    } else {
        let (t, v) = train.split_tail(val_size)?;
        (t, Some(v))
    };
    Ok(Splits {
        train,
        val,
        test: mnist.test,
    })
}

/// Per-layer parameter table with totals and the ratio against the reference LeNet.
pub fn param_table(net: &Network<f32>) -> Result<String, CliError> {
    let rows: Vec<LayerParams> = net.param_table();
    let reference = lenet_reference::<f32>(0)?.param_count();
    let mut s = String::new();
    let _ = writeln!(s, "{:>5}  {:<9} {:>10} {:>10}  output", "layer", "kind", "learnable", "stored");
    for r in &rows {
        let _ = writeln!(
            s,
            "{:>5}  {:<9} {:>10} {:>10}  {:?}",
            r.index, r.kind, r.learnable, r.weights, r.output_shape
        );
    }
    let total = net.param_count();
    let _ = writeln!(s, "total learnable {total}, stored {}", net.weight_count());
    let _ = writeln!(
        s,
        "reference LeNet {reference}, reduction {:.2}x",
        reference as f64 / total as f64
    );
    Ok(s)
}

fn metrics_row(m: &EpochMetrics) -> String {
    let val = m.val_error.map(|v| v.to_string()).unwrap_or_default();
    format!("{},{},{}", m.epoch, m.train_loss, val)
}

pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
    pub network: Network<f32>,
}

pub fn apply_train_args(cfg: &mut ExperimentConfig, a: &TrainArgs) {
    if let Some(m) = a.model {
        cfg.model = match m {
            ModelArg::LenetRef => ModelKind::LenetRef,
            ModelArg::Deepfried => ModelKind::Deepfried,
        };
    }
    if let Some(n) = a.n_features {
        cfg.fastfood.n_features = n;
    }
    if let Some(m) = a.mode {
        cfg.fastfood.mode = match m {
            ModeArg::Random => ModeName::Random,
            ModeArg::Adaptive => ModeName::Adaptive,
        };
    }
    if let Some(e) = a.epochs {
        cfg.optimizer.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.optimizer.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.lr = lr;
    }
    if a.train_limit.is_some() {
        cfg.data.train_limit = a.train_limit;
    }
    if let Some(v) = a.val_size {
        cfg.data.val_size = v;
    }
}

pub fn train(mut cfg: ExperimentConfig, a: &TrainArgs, out: &Path) -> Result<TrainOutcome, CliError> {
    apply_train_args(&mut cfg, a);
    let mut net = build_model(&cfg)?;
    let data = load_data(&cfg)?;
    print!("{}", param_table(&net)?);

    let mut csv = format!("{METRICS_HEADER}\n");
    let mut trainer = Trainer::new(cfg.train_config())?;
    let metrics = trainer.fit(&mut net, &data.train, data.val.as_ref(), |m| {
        let row = metrics_row(m);
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
    })?;
    write_file(&out.join("metrics.csv"), &csv)?;
    let path = out.join(MODEL_FILE);
    let meta = json!({ "command": "train", "config": cfg });
    checkpoint::save(&path, &net, meta)?;
    Ok(TrainOutcome {
        metrics,
        checkpoint: path,
        network: net,
    })
}

/// Data settings for `eval`: the training run's config stored in the
/// checkpoint unless a config file was given, with `--data-dir` on top.
fn eval_config(cfg: ExperimentConfig, meta: &serde_json::Value, explicit: bool) -> ExperimentConfig {
    if explicit {
        return cfg;
    }
    match serde_json::from_value::<ExperimentConfig>(meta["config"].clone()) {
        Ok(mut stored) => {
            if cfg.data.dir.is_some() {
                stored.data.dir = cfg.data.dir;
            }
            stored
        }
        Err(_) => cfg,
    }
}

pub fn eval(cfg: ExperimentConfig, a: &EvalArgs, explicit_config: bool) -> Result<f64, CliError> {
    let ck = checkpoint::load::<f32>(&a.checkpoint)?;
    let cfg = eval_config(cfg, &ck.header.meta, explicit_config);
    let data = load_data(&cfg)?;
    let set = match a.split {
        Split::Test => &data.test,
        Split::Val => data
            .val
            .as_ref()
            .ok_or_else(|| CliError::Config("`data.val_size`: no validation split configured".into()))?,
    };
    Ok(error_rate(&ck.network, set, EVAL_BATCH)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub d: usize,
    pub dense_ns: f64,
    pub fastfood_ns: f64,
    pub dense_ops: u64,
    pub fastfood_ops: u64,
}

fn median_ns(reps: usize, mut f: impl FnMut()) -> f64 {
    let mut t: Vec<f64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_nanos() as f64
        })
        .collect();
    t.sort_by(f64::total_cmp);
    t[t.len() / 2]
}

pub fn bench(mut cfg: ExperimentConfig, a: &BenchArgs, out: &Path) -> Result<Vec<BenchRow>, CliError> {
    if let Some(d) = &a.dims {
        cfg.bench.dims = d.clone();
    }
    if let Some(r) = a.reps {
        cfg.bench.reps = r;
    }
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut csv = format!("{BENCH_HEADER}\n");
    for &d in &cfg.bench.dims {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ d as u64);
        let w: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut y = vec![0.0; d];
        let ff = FastfoodLayer::<f64>::init_random(d, d, cfg.seed, &FastfoodInit::default())?;

        let ((), dense_ops) = ops::measure(|| ops::dense_matvec(&w, &x, &mut y));
        let (res, fastfood_ops) = ops::measure(|| ff.forward(&x, 1));
        res?;
        let dense_ns = median_ns(cfg.bench.reps, || {
            ops::dense_matvec(&w, std::hint::black_box(&x), &mut y);
            std::hint::black_box(&y);
        });
        let fastfood_ns = median_ns(cfg.bench.reps, || {
            let _ = std::hint::black_box(ff.forward(std::hint::black_box(&x), 1));
        });
        let row = BenchRow {
            d,
            dense_ns,
            fastfood_ns,
            dense_ops,
            fastfood_ops,
        };
        let line = format!("{d},{dense_ns},{fastfood_ns},{dense_ops},{fastfood_ops}");
        println!("{line}");
        csv.push_str(&line);
        csv.push('\n');
        rows.push(row);
    }
    write_file(&out.join("bench.csv"), &csv)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelRow {
    pub n_features: usize,
    pub seed: u64,
    pub rmse_dense: f64,
    pub rmse_fastfood: f64,
}

pub fn kernel(mut cfg: ExperimentConfig, a: &KernelArgs, out: &Path) -> Result<Vec<KernelRow>, CliError> {
    if let Some(n) = &a.n_features {
        cfg.kernel.n_features = n.clone();
    }
    if let Some(s) = a.seeds {
        cfg.kernel.seeds = s;
    }
    if let Some(p) = a.pairs {
        cfg.kernel.pairs = p;
    }
    cfg.validate()?;
    let k = &cfg.kernel;
    let mut rows = Vec::new();
    let mut csv = format!("{KERNEL_HEADER}\n");
    for &n in &k.n_features {
        for s in 0..k.seeds as u64 {
            let seed = cfg.seed.wrapping_add(s);
            let pairs = random_pairs(k.pairs, k.dim, k.point_std, seed);
            let map = FeatureMap::rbf(n, k.lengthscale, seed);
            let dense = kernel_error(&map, &pairs)?;
            let fast = kernel_error(&map.with_projector(Projector::FastfoodRandom), &pairs)?;
            let row = KernelRow {
                n_features: n,
                seed,
                rmse_dense: dense.rmse,
                rmse_fastfood: fast.rmse,
            };
            let line = format!("{n},{seed},{},{}", dense.rmse, fast.rmse);
            println!("{line}");
            csv.push_str(&line);
            csv.push('\n');
            rows.push(row);
        }
    }
    write_file(&out.join("kernel.csv"), &csv)?;
    Ok(rows)
}

/// The dense layer with the most weights.
fn largest_dense(net: &Network<f32>) -> Option<usize> {
    net.layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::Dense(d) => Some((i, d.d_in * d.d_out)),
            _ => None,
        })
        .max_by_key(|&(i, n)| (n, std::cmp::Reverse(i)))
        .map(|(i, _)| i)
}

pub struct CompressOutcome {
    pub report: CompressionReport,
    pub checkpoint: PathBuf,
    pub network: Network<f32>,
}

pub fn compress(mut cfg: ExperimentConfig, a: &CompressArgs, out: &Path) -> Result<CompressOutcome, CliError> {
    if a.layer.is_some() {
        cfg.compress.layer = a.layer;
    }
    if a.k.is_some() {
        cfg.compress.k = a.k;
    }
    if let Some(e) = a.fine_tune_epochs {
        cfg.compress.fine_tune_epochs = e;
    }
    cfg.validate()?;
    let ck = checkpoint::load::<f32>(&a.checkpoint)?;
    let mut net = ck.network;
    let index = match cfg.compress.layer {
        Some(i) => i,
        None => largest_dense(&net).ok_or_else(|| CliError::Config("`compress.layer`: model has no dense layer".into()))?,
    };
    let k = match (cfg.compress.k, net.layers().get(index)) {
        (Some(k), _) => k,
        (None, Some(Layer::Dense(d))) => (d.d_in.min(d.d_out) / 2).max(1),
        (None, _) => 1,
    };
    let report = replace_dense_with_lowrank(&mut net, index, k).map_err(|e| match e {
        fastfood::Error::State(msg) | fastfood::Error::Dimension(msg) => CliError::Config(format!("`compress.layer`: {msg}")),
        other => other.into(),
    })?;

    if cfg.compress.fine_tune_epochs > 0 {
        let data = load_data(&cfg)?;
        let mut tc = cfg.train_config();
        tc.epochs = cfg.compress.fine_tune_epochs;
        Trainer::new(tc)?.fit(&mut net, &data.train, data.val.as_ref(), |m| println!("{}", metrics_row(m)))?;
    }

    let r = &report;
    let line = format!("{},{},{},{},{}", r.layer, r.k, r.params_before, r.params_after, r.fro_error);
    println!("{line}");
    write_file(&out.join("compress.csv"), &format!("{COMPRESS_HEADER}\n{line}\n"))?;
    let path = out.join(COMPRESSED_FILE);
    let meta = json!({
        "command": "compress",
        "config": cfg,
        "source": ck.header.meta,
        "layer": r.layer,
        "k": r.k,
    });
    checkpoint::save(&path, &net, meta)?;
    Ok(CompressOutcome {
        report,
        checkpoint: path,
        network: net,
    })
}
