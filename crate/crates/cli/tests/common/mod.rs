#![allow(dead_code)]

use std::path::{Path, PathBuf};

use fastfood::data::{write_idx_images, write_idx_labels, IdxImages};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Class `c` is a bright 6×6 square in cell `(c % 4, c / 4)` of a 4×3 grid,
/// over low-level uniform noise. Labels cycle through the ten classes.
/// With `structured = false` every image is pure noise, independent of its label.
fn digits(count: usize, structured: bool, rng: &mut ChaCha8Rng) -> (IdxImages, Vec<u8>) {
    let mut pixels = Vec::with_capacity(count * 784);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let c = i % 10;
        let (r0, c0) = (2 + 8 * (c / 4), 1 + 7 * (c % 4));
        for r in 0..28 {
            for col in 0..28 {
                let on = structured && (r0..r0 + 6).contains(&r) && (c0..c0 + 6).contains(&col);
                let noise: u8 = if structured { rng.random_range(0..50) } else { rng.random() };
                let base: u8 = if on { 200 } else { 0 };
                pixels.push(base.saturating_add(noise));
            }
        }
        labels.push(c as u8);
    }
    let images = IdxImages {
        count,
        rows: 28,
        cols: 28,
        pixels,
    };
    (images, labels)
}

/// Writes the four MNIST-named IDX files into `dir`.
pub fn write_synthetic_mnist(dir: &Path, n_train: usize, n_test: usize, seed: u64) {
    write_mnist(dir, n_train, n_test, true, seed)
}

/// Like [`write_synthetic_mnist`] but the images carry no label information.
pub fn write_noise_mnist(dir: &Path, n_train: usize, n_test: usize, seed: u64) {
    write_mnist(dir, n_train, n_test, false, seed)
}

fn write_mnist(dir: &Path, n_train: usize, n_test: usize, structured: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (img, lab) = digits(n_train, structured, &mut rng);
    write_idx_images(&dir.join("train-images-idx3-ubyte"), &img).unwrap();
    write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &lab).unwrap();
    let (img, lab) = digits(n_test, structured, &mut rng);
    write_idx_images(&dir.join("t10k-images-idx3-ubyte"), &img).unwrap();
    write_idx_labels(&dir.join("t10k-labels-idx1-ubyte"), &lab).unwrap();
}

pub struct Workspace {
    pub _tmp: tempfile::TempDir,
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: PathBuf,
}

/// Small deep fried run on synthetic data: 400 train, 100 val, 200 test.
pub const SMALL_CONFIG: &str = r#"{
  "model": "deepfried",
  "seed": 11,
  "fastfood": {"n_features": 64, "mode": "adaptive", "sigma": 0.05},
  "optimizer": {"epochs": 2, "batch_size": 32},
  "data": {"val_size": 100}
}"#;

pub fn workspace(config: &str, n_train: usize, n_test: usize) -> Workspace {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    let out = tmp.path().join("out");
    std::fs::create_dir_all(&data).unwrap();
    write_synthetic_mnist(&data, n_train, n_test, 5);
    let config_path = tmp.path().join("config.json");
    std::fs::write(&config_path, config).unwrap();
    Workspace {
        _tmp: tmp,
        data,
        out,
        config: config_path,
    }
}

impl Workspace {
    /// `fastfood <args> --config .. --data-dir .. --out ..`, returning the exit code.
    pub fn run(&self, args: &[&str]) -> u8 {
        let mut full: Vec<String> = vec!["fastfood".into()];
        full.extend(args.iter().map(|s| s.to_string()));
        full.extend([
            "--config".into(),
            self.config.display().to_string(),
            "--data-dir".into(),
            self.data.display().to_string(),
            "--out".into(),
            self.out.display().to_string(),
        ]);
        fastfood_cli::run_args(full)
    }

    pub fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.out.join(name)).unwrap()
    }
}
