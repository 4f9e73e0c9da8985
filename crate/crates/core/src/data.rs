//! Dataset ingestion: MNIST IDX files and synthetic Gaussian blobs.
//!
//! IDX is a big-endian container: a 4-byte magic (`0x00000803` for `u8`
//! image tensors, `0x00000801` for `u8` label vectors), one `u32` per
//! dimension, then the raw bytes. Gzip-compressed files are detected by
//! their `1f 8b` prefix and inflated transparently.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::Tensor;
use crate::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
/// Size of the official MNIST validation split carved from the training set.
pub const MNIST_VAL_SIZE: usize = 10_000;

/// Raw `u8` images as stored in an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    /// `(N, 1, rows, cols)` tensor with pixels divided by 255.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
        Tensor::new(vec![self.count, 1, self.rows, self.cols], data).expect("pixel count checked at parse time")
    }
}

/// Reads a file, inflating it first if it is gzip-compressed.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let need = 4 * (1 + ndims);
    if bytes.len() < need {
        return Err(Error::Format(format!("IDX header truncated ({} bytes)", bytes.len())));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let found = word(0);
    if found != magic {
        return Err(Error::Format(format!(
            "IDX magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    Ok((1..=ndims).map(|i| word(i) as usize).collect())
}

fn body(bytes: &[u8], offset: usize, expected: usize) -> Result<Vec<u8>> {
    let have = bytes.len() - offset;
    if have != expected {
        return Err(Error::Format(format!(
            "IDX payload is {have} bytes, header promises {expected}"
        )));
    }
    Ok(bytes[offset..].to_vec())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let dims = header(bytes, IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = body(bytes, 16, count * rows * cols)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let dims = header(bytes, LABELS_MAGIC, 1)?;
    body(bytes, 8, dims[0])
}

pub fn load_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&read_maybe_gzip(path)?).map_err(|e| with_path(e, path))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read_maybe_gzip(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn u32_be(n: usize) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_be_bytes)
        .map_err(|_| Error::dim(format!("dimension {n} does not fit a u32")))
}

pub fn encode_idx_images(images: &IdxImages) -> Result<Vec<u8>> {
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(Error::dim("pixel buffer does not match image dimensions"));
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for n in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&u32_be(n)?);
    }
    out.extend_from_slice(&images.pixels);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&u32_be(labels.len())?);
    out.extend_from_slice(labels);
    Ok(out)
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<()> {
    Ok(fs::write(path, encode_idx_images(images)?)?)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    Ok(fs::write(path, encode_idx_labels(labels)?)?)
}

/// Labelled samples; the first tensor axis indexes samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::dim(format!(
                "{} samples but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Format(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn from_idx(images: &IdxImages, labels: &[u8], classes: usize) -> Result<Self> {
        Self::new(images.to_tensor(), labels.iter().map(|&y| usize::from(y)).collect(), classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.images.sample_shape()
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let s = self.images.sample_len();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend_from_slice(&src[i * s..(i + 1) * s]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered sizes agree"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }

    /// `(first n − tail, last tail)` samples.
    pub fn split_tail(&self, tail: usize) -> Result<(Dataset, Dataset)> {
        if tail > self.len() {
            return Err(Error::config("val_size", format!("{tail} exceeds {} samples", self.len())));
        }
        let cut = self.len() - tail;
        let head: Vec<usize> = (0..cut).collect();
        let rest: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&head), self.subset(&rest)))
    }
}

/// Deterministic permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Returns `dataset` with its samples permuted by a seeded generator.
pub fn shuffle(dataset: &Dataset, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dataset.subset(&shuffled_indices(dataset.len(), &mut rng))
}

/// The four canonical MNIST files, gzipped or not.
#[derive(Debug, Clone)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistPaths {
    /// Finds `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` in `dir`.
    pub fn locate(dir: &Path) -> Result<Self> {
        let find = |stem: &str| -> Result<PathBuf> {
            [stem.to_string(), format!("{stem}.gz")]
                .iter()
                .map(|name| dir.join(name))
                .find(|p| p.is_file())
                .ok_or_else(|| Error::Format(format!("{stem}[.gz] not found in {}", dir.display())))
        };
        Ok(Self {
            train_images: find("train-images-idx3-ubyte")?,
            train_labels: find("train-labels-idx1-ubyte")?,
            test_images: find("t10k-images-idx3-ubyte")?,
            test_labels: find("t10k-labels-idx1-ubyte")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

impl Mnist {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = MnistPaths::locate(dir)?;
        let load = |img: &Path, lab: &Path| -> Result<Dataset> {
            let images = load_idx_images(img)?;
            let labels = load_idx_labels(lab)?;
            if images.count != labels.len() {
                return Err(Error::Format(format!(
                    "{} images but {} labels",
                    images.count,
                    labels.len()
                )));
            }
            Dataset::from_idx(&images, &labels, 10)
        };
        Ok(Self {
            train: load(&p.train_images, &p.train_labels)?,
            test: load(&p.test_images, &p.test_labels)?,
        })
    }

    /// `(train, validation)` with the last `val_size` training images held out.
    pub fn train_val(&self, val_size: usize) -> Result<(Dataset, Dataset)> {
        self.train.split_tail(val_size)
    }
}

/// `n` points in `d` dimensions from `classes` unit-variance Gaussian
/// clusters whose means are pairwise `separation` apart.
///
/// Two classes sit at `±(separation/2)·e₀`; more classes sit on scaled basis
/// vectors `(separation/√2)·e_c`, which requires `d ≥ classes`. Labels cycle
/// `0, 1, …, classes−1`.
pub fn synth_gaussian_blobs(n: usize, d: usize, classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 || classes < 2 {
        return Err(Error::config("blobs", "need n ≥ 1, d ≥ 1 and at least 2 classes"));
    }
    if classes > 2 && d < classes {
        return Err(Error::config("blobs", format!("{classes} classes need d ≥ {classes}")));
    }
    let mean = |c: usize, j: usize| -> f64 {
        if classes == 2 {
            match (c, j) {
                (0, 0) => separation / 2.0,
                (1, 0) => -separation / 2.0,
                _ => 0.0,
            }
        } else if j == c {
            separation / std::f64::consts::SQRT_2
        } else {
            0.0
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * d);
    for &c in &labels {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push((mean(c, j) + z) as f32);
        }
    }
    Dataset::new(Tensor::new(vec![n, d], data)?, labels, classes)
}
