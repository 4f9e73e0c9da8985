//! Random-feature kernel approximations.
//!
//! A shift-invariant kernel is the Fourier transform of a spectral density,
//! so drawing the rows of `W` from that density and taking
//! `φ(x) = sqrt(α/n) (cos(Wx), sin(Wx))` gives `⟨φ(x), φ(x')⟩`, an unbiased
//! estimate of `α·k(x − x')`. For the squared exponential kernel the density
//! is `N(0, diag(ℓ²)⁻¹)`.
//!
//! ReLU features `sqrt(1/n) max(0, Wx)` with standard Gaussian `W` estimate
//! the first-order arc-cosine kernel. Their large-`n` limit is
//! `(1/2π) ‖x‖‖x'‖ (sin θ + (π − θ) cos θ)`, i.e. exactly
//! [`ARCCOS_ESTIMATOR_SCALE`] times the closed form returned by
//! [`exact_kernel`].
//!
//! A [`FeatureMap`] is a pure description. The projection is regenerated
//! from its seed by [`FeatureMap::build`], and never serialised.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::fastfood::{FastfoodInit, FastfoodLayer, ScaleInit};
use crate::{Error, Real, Result};

/// Limit of the ReLU-feature inner product divided by the closed-form
/// arc-cosine kernel `(1/π)‖x‖‖x'‖(sin θ + (π − θ) cos θ)`.
pub const ARCCOS_ESTIMATOR_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Rbf,
    ArccosRelu,
}

/// How `Wx` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projector {
    /// Explicit `n × d` i.i.d. Gaussian matrix.
    DenseGaussian,
    /// A random Fastfood layer whose rows have the same norm law as the
    /// Gaussian matrix it stands in for.
    FastfoodRandom,
}

impl Projector {
    pub fn as_str(self) -> &'static str {
        match self {
            Projector::DenseGaussian => "dense_gaussian",
            Projector::FastfoodRandom => "fastfood_random",
        }
    }
}

/// Isotropic or per-dimension (ARD) lengthscale.
#[derive(Debug, Clone, PartialEq)]
pub enum Lengthscale {
    Isotropic(f64),
    Ard(Vec<f64>),
}

impl Lengthscale {
    fn validate(&self, d: Option<usize>) -> Result<()> {
        let ok = |l: f64| l.is_finite() && l > 0.0;
        match self {
            Lengthscale::Isotropic(l) if ok(*l) => Ok(()),
            Lengthscale::Ard(ls) if ls.iter().all(|&l| ok(l)) => match d {
                Some(d) if d != ls.len() => Err(Error::dim(format!(
                    "{} lengthscales for {d}-dimensional input",
                    ls.len()
                ))),
                _ if ls.is_empty() => Err(Error::config("lengthscale", "empty ARD vector")),
                _ => Ok(()),
            },
            _ => Err(Error::config("lengthscale", "must be positive and finite")),
        }
    }

    fn inv(&self, j: usize) -> f64 {
        match self {
            Lengthscale::Isotropic(l) => 1.0 / l,
            Lengthscale::Ard(ls) => 1.0 / ls[j],
        }
    }
}

/// Parameters of a random feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub kind: KernelKind,
    pub projector: Projector,
    /// Number of projections `n`. RBF maps emit `2n` features.
    pub n_features: usize,
    /// RBF only; ignored for arc-cosine maps.
    pub lengthscale: Lengthscale,
    /// Overall kernel scale `α`.
    pub alpha: f64,
    pub seed: u64,
}

impl FeatureMap {
    pub fn rbf(n_features: usize, lengthscale: f64, seed: u64) -> Self {
        Self {
            kind: KernelKind::Rbf,
            projector: Projector::DenseGaussian,
            n_features,
            lengthscale: Lengthscale::Isotropic(lengthscale),
            alpha: 1.0,
            seed,
        }
    }

    pub fn arccos_relu(n_features: usize, seed: u64) -> Self {
        Self {
            kind: KernelKind::ArccosRelu,
            lengthscale: Lengthscale::Isotropic(1.0),
            ..Self::rbf(n_features, 1.0, seed)
        }
    }

    pub fn with_projector(mut self, projector: Projector) -> Self {
        self.projector = projector;
        self
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.n_features == 0 {
            return Err(Error::config("n_features", "must be at least 1"));
        }
        if d == 0 {
            return Err(Error::dim("input dimension must be positive"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("alpha", "must be positive and finite"));
        }
        if self.kind == KernelKind::Rbf {
            self.lengthscale.validate(Some(d))?;
        }
        Ok(())
    }

    /// Output length of the feature vector.
    pub fn output_len(&self) -> usize {
        match self.kind {
            KernelKind::Rbf => 2 * self.n_features,
            KernelKind::ArccosRelu => self.n_features,
        }
    }

    /// Samples the projection for `d`-dimensional inputs.
    pub fn build(&self, d: usize) -> Result<Featurizer> {
        self.validate(d)?;
        let n = self.n_features;
        let inv_scale = match self.kind {
            KernelKind::Rbf => (0..d).map(|j| self.lengthscale.inv(j)).collect(),
            KernelKind::ArccosRelu => vec![1.0; d],
        };
        let proj = match self.projector {
            Projector::DenseGaussian => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                Proj::Dense((0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect())
            }
            Projector::FastfoodRandom => {
                let init = FastfoodInit {
                    scale: ScaleInit::Chi,
                    ..FastfoodInit::default()
                };
                Proj::Fastfood(FastfoodLayer::init_random(d, n, self.seed, &init)?)
            }
        };
        Ok(Featurizer {
            map: self.clone(),
            d,
            inv_scale,
            proj,
        })
    }
}

#[derive(Debug, Clone)]
enum Proj {
    /// Row-major `n × d`, standard normal entries.
    Dense(Vec<f64>),
    Fastfood(FastfoodLayer<f64>),
}

/// A feature map with its projection materialised for one input dimension.
#[derive(Debug, Clone)]
pub struct Featurizer {
    map: FeatureMap,
    d: usize,
    /// Per-coordinate `1/ℓ_j`, applied to the input before a unit-variance
    /// projection; equivalent to drawing `W` from `N(0, diag(ℓ²)⁻¹)`.
    inv_scale: Vec<f64>,
    proj: Proj,
}

impl Featurizer {
    pub fn map(&self) -> &FeatureMap {
        &self.map
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    /// `Wx` for a batch of row-major samples; returns `batch × n`.
    pub fn project(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        if x.len() != batch * self.d {
            return Err(Error::dim(format!(
                "expected {batch}×{} inputs, got {}",
                self.d,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite kernel input".into()));
        }
        let scaled: Vec<f64> = x
            .chunks_exact(self.d)
            .flat_map(|row| row.iter().zip(&self.inv_scale).map(|(v, s)| v * s))
            .collect();
        let n = self.map.n_features;
        match &self.proj {
            Proj::Dense(w) => {
                let mut out = vec![0.0; batch * n];
                f64::gemm(batch, self.d, n, 1.0, &scaled, self.d, 1, w, 1, self.d, 0.0, &mut out, n, 1);
                Ok(out)
            }
            Proj::Fastfood(layer) => Ok(layer.forward(&scaled, batch)?.0),
        }
    }

    /// Feature vectors for a batch; `batch × output_len()`.
    pub fn features(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        let wx = self.project(x, batch)?;
        let n = self.map.n_features;
        let c = (self.map.alpha / n as f64).sqrt();
        let mut out = Vec::with_capacity(batch * self.map.output_len());
        for row in wx.chunks_exact(n) {
            match self.map.kind {
                KernelKind::Rbf => {
                    out.extend(row.iter().map(|v| c * v.cos()));
                    out.extend(row.iter().map(|v| c * v.sin()));
                }
                KernelKind::ArccosRelu => out.extend(row.iter().map(|v| c * v.max(0.0))),
            }
        }
        Ok(out)
    }

    /// `⟨φ(x), φ(x')⟩`.
    pub fn estimate(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        let mut both = x.to_vec();
        both.extend_from_slice(x2);
        let f = self.features(&both, 2)?;
        let (a, b) = f.split_at(self.map.output_len());
        Ok(dot(a, b))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn require_kind(map: &FeatureMap, kind: KernelKind) -> Result<()> {
    if map.kind != kind {
        return Err(Error::config("kind", format!("feature map is {:?}, not {kind:?}", map.kind)));
    }
    Ok(())
}

/// `sqrt(α/n) (cos(Wx) ‖ sin(Wx))`, regenerating `W` from the map's seed.
pub fn rbf_features(map: &FeatureMap, x: &[f64]) -> Result<Vec<f64>> {
    require_kind(map, KernelKind::Rbf)?;
    map.build(x.len())?.features(x, 1)
}

/// `sqrt(α/n) max(0, Wx)` with standard Gaussian `W` (`α = 1` by default).
pub fn arccos_relu_features(map: &FeatureMap, x: &[f64]) -> Result<Vec<f64>> {
    require_kind(map, KernelKind::ArccosRelu)?;
    map.build(x.len())?.features(x, 1)
}

/// Closed-form kernels used as oracles.
///
/// * `Rbf`: `α·exp(−Σ_j (x_j − x'_j)² / 2ℓ_j²)`
/// * `ArccosRelu`: `(α/π)‖x‖‖x'‖(sin θ + (π − θ) cos θ)`
pub fn exact_kernel(kind: KernelKind, x: &[f64], x2: &[f64], lengthscale: &Lengthscale, alpha: f64) -> Result<f64> {
    if x.len() != x2.len() || x.is_empty() {
        return Err(Error::dim(format!("kernel arguments of length {} and {}", x.len(), x2.len())));
    }
    match kind {
        KernelKind::Rbf => {
            lengthscale.validate(Some(x.len()))?;
            let q: f64 = x
                .iter()
                .zip(x2)
                .enumerate()
                .map(|(j, (a, b))| ((a - b) * lengthscale.inv(j)).powi(2))
                .sum();
            Ok(alpha * (-0.5 * q).exp())
        }
        KernelKind::ArccosRelu => {
            let (na, nb) = (dot(x, x).sqrt(), dot(x2, x2).sqrt());
            if na == 0.0 || nb == 0.0 {
                return Ok(0.0);
            }
            let cos = (dot(x, x2) / (na * nb)).clamp(-1.0, 1.0);
            let theta = cos.acos();
            let pi = std::f64::consts::PI;
            Ok(alpha / pi * na * nb * (theta.sin() + (pi - theta) * cos))
        }
    }
}

/// Point pairs `(x_i, x'_i)` with i.i.d. `N(0, std²)` entries.
pub fn random_pairs(count: usize, d: usize, std: f64, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Vec<f64> {
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                std * z
            })
            .collect()
    };
    (0..count).map(|_| (draw(), draw())).collect()
}

/// Estimator values `⟨φ(x), φ(x')⟩` for every pair, computed in one batch.
pub fn estimates(featurizer: &Featurizer, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<f64>> {
    let mut x = Vec::with_capacity(2 * pairs.len() * featurizer.input_dim());
    for (a, b) in pairs {
        x.extend_from_slice(a);
        x.extend_from_slice(b);
    }
    let f = featurizer.features(&x, 2 * pairs.len())?;
    let len = featurizer.map().output_len();
    Ok(f.chunks_exact(2 * len).map(|c| dot(&c[..len], &c[len..])).collect())
}

/// Error summary of a kernel estimate against its closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelError {
    pub mean_abs: f64,
    pub rmse: f64,
}

/// Compares a feature map's estimates on `pairs` with the exact kernel.
pub fn kernel_error(map: &FeatureMap, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<KernelError> {
    let d = pairs.first().map_or(0, |p| p.0.len());
    let est = estimates(&map.build(d)?, pairs)?;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for ((a, b), e) in pairs.iter().zip(est) {
        let k = exact_kernel(map.kind, a, b, &map.lengthscale, map.alpha)?;
        let k = match map.kind {
            KernelKind::Rbf => k,
            KernelKind::ArccosRelu => ARCCOS_ESTIMATOR_SCALE * k,
        };
        abs += (e - k).abs();
        sq += (e - k).powi(2);
    }
    let m = pairs.len() as f64;
    Ok(KernelError {
        mean_abs: abs / m,
        rmse: (sq / m).sqrt(),
    })
}

/// Standard error of the dense-Gaussian RBF estimator for one pair:
/// `α·sqrt(Var cos(w·δ) / n)` with `Var cos(w·δ) = ½(1 + k(2δ)) − k(δ)²`.
pub fn rbf_standard_error(x: &[f64], x2: &[f64], lengthscale: &Lengthscale, alpha: f64, n: usize) -> Result<f64> {
    let k1 = exact_kernel(KernelKind::Rbf, x, x2, lengthscale, 1.0)?;
    let k2 = k1.powi(4);
    let var = (0.5 * (1.0 + k2) - k1 * k1).max(0.0);
    Ok(alpha * (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rbf_self_inner_product_is_alpha() {
        let mut map = FeatureMap::rbf(64, 0.7, 3);
        map.alpha = 2.5;
        for proj in [Projector::DenseGaussian, Projector::FastfoodRandom] {
            let f = map.clone().with_projector(proj).build(5).unwrap();
            let x = [0.3, -1.2, 4.0, 0.0, 2.2];
            assert!((f.estimate(&x, &x).unwrap() - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn rbf_closed_form_values() {
        let l = Lengthscale::Isotropic(1.5);
        let x = [1.0, 2.0, 3.0];
        assert_eq!(exact_kernel(KernelKind::Rbf, &x, &x, &l, 1.0).unwrap(), 1.0);
        let r = 1.5 * (2.0 * 2f64.ln()).sqrt();
        let k = exact_kernel(KernelKind::Rbf, &[0.0, 0.0], &[r, 0.0], &Lengthscale::Isotropic(1.5), 1.0).unwrap();
        assert!((k - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ard_matches_rescaled_isotropic() {
        let ard = Lengthscale::Ard(vec![2.0, 0.5]);
        let a = exact_kernel(KernelKind::Rbf, &[1.0, 1.0], &[0.0, 0.0], &ard, 1.0).unwrap();
        let b = exact_kernel(KernelKind::Rbf, &[0.5, 2.0], &[0.0, 0.0], &Lengthscale::Isotropic(1.0), 1.0).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(exact_kernel(KernelKind::Rbf, &[1.0], &[0.0], &ard, 1.0).is_err());
    }

    #[test]
    fn arccos_closed_form_values() {
        let l = Lengthscale::Isotropic(1.0);
        let k = exact_kernel(KernelKind::ArccosRelu, &[1.0, 0.0], &[-1.0, 0.0], &l, 1.0).unwrap();
        assert!(k.abs() < 1e-15);
        let k = exact_kernel(KernelKind::ArccosRelu, &[3.0, 4.0], &[3.0, 4.0], &l, 1.0).unwrap();
        assert!((k - 25.0).abs() < 1e-12);
        let k = exact_kernel(KernelKind::ArccosRelu, &[1.0, 0.0], &[0.0, 2.0], &l, 1.0).unwrap();
        assert!((k - 2.0 / std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn zero_input_gives_zero_relu_features() {
        let f = arccos_relu_features(&FeatureMap::arccos_relu(32, 1), &[0.0; 7]).unwrap();
        assert_eq!(f, vec![0.0; 32]);
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut map = FeatureMap::rbf(8, 0.0, 0);
        assert!(matches!(map.build(3), Err(Error::Config { .. })));
        map.lengthscale = Lengthscale::Isotropic(-1.0);
        assert!(rbf_features(&map, &[1.0]).is_err());
        map.lengthscale = Lengthscale::Isotropic(1.0);
        map.n_features = 0;
        assert!(map.build(3).is_err());
        assert!(rbf_features(&FeatureMap::arccos_relu(4, 0), &[1.0]).is_err());
    }

    #[test]
    fn estimator_is_symmetric() {
        let pairs = random_pairs(5, 9, 0.5, 4);
        for proj in [Projector::DenseGaussian, Projector::FastfoodRandom] {
            for map in [FeatureMap::rbf(100, 1.0, 8), FeatureMap::arccos_relu(100, 8)] {
                let f = map.with_projector(proj).build(9).unwrap();
                for (a, b) in &pairs {
                    assert_eq!(f.estimate(a, b).unwrap(), f.estimate(b, a).unwrap());
                }
            }
        }
    }

    #[test]
    fn rbf_estimate_is_translation_invariant() {
        let f = FeatureMap::rbf(512, 1.0, 2).build(4).unwrap();
        let (x, y) = ([0.1, 0.2, -0.3, 0.4], [0.5, -0.1, 0.0, 0.2]);
        let shift = [3.0, -1.0, 0.5, 2.0];
        let xs: Vec<f64> = x.iter().zip(&shift).map(|(a, s)| a + s).collect();
        let ys: Vec<f64> = y.iter().zip(&shift).map(|(a, s)| a + s).collect();
        let a = f.estimate(&x, &y).unwrap();
        let b = f.estimate(&xs, &ys).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn dense_projection_is_deterministic_per_seed() {
        let x = [0.3, 0.1, -0.7];
        let a = rbf_features(&FeatureMap::rbf(16, 1.0, 5), &x).unwrap();
        assert_eq!(a, rbf_features(&FeatureMap::rbf(16, 1.0, 5), &x).unwrap());
        assert_ne!(a, rbf_features(&FeatureMap::rbf(16, 1.0, 6), &x).unwrap());
    }

    #[test]
    fn fastfood_projection_has_gaussian_marginals() {
        // Entries of W x for unit x should be N(0, 1/ℓ²).
        let map = FeatureMap::rbf(8192, 0.5, 1).with_projector(Projector::FastfoodRandom);
        let f = map.build(16).unwrap();
        let mut x = vec![0.0; 16];
        x[3] = 1.0;
        let wx = f.project(&x, 1).unwrap();
        let var = wx.iter().map(|v| v * v).sum::<f64>() / wx.len() as f64;
        assert!((var - 4.0).abs() < 0.25, "variance {var}");
    }

    #[test]
    fn relu_features_converge_to_half_the_closed_form() {
        let x = [1.0, 0.5, -0.25, 2.0];
        let f = arccos_relu_features(&FeatureMap::arccos_relu(65536, 3), &x).unwrap();
        let est = dot(&f, &f);
        let norm2 = dot(&x, &x);
        assert!((est / (norm2 / 2.0) - 1.0).abs() < 0.02, "{est} vs {}", norm2 / 2.0);
    }

    #[test]
    fn standard_error_vanishes_at_zero_distance() {
        let l = Lengthscale::Isotropic(1.0);
        assert_eq!(rbf_standard_error(&[1.0], &[1.0], &l, 1.0, 10).unwrap(), 0.0);
        let far = rbf_standard_error(&[0.0], &[100.0], &l, 1.0, 2).unwrap();
        assert!((far - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rbf_estimate_close_to_closed_form() {
        let pairs = random_pairs(100, 16, 0.25, 10);
        for proj in [Projector::DenseGaussian, Projector::FastfoodRandom] {
            let err = kernel_error(&FeatureMap::rbf(4096, 1.0, 1).with_projector(proj), &pairs).unwrap();
            assert!(err.mean_abs <= 0.05, "{proj:?}: {err:?}");
        }
    }

    #[test]
    fn rmse_shrinks_like_inverse_root_n() {
        let pairs = random_pairs(100, 16, 0.25, 11);
        let mut ratio = 0.0;
        for seed in 0..10 {
            let small = kernel_error(&FeatureMap::rbf(256, 1.0, seed), &pairs).unwrap().rmse;
            let large = kernel_error(&FeatureMap::rbf(1024, 1.0, seed + 100), &pairs).unwrap().rmse;
            ratio += large / small / 10.0;
        }
        assert!((0.35..=0.65).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn fastfood_and_dense_estimates_agree_within_sampling_error() {
        let n = 4096;
        let pairs = random_pairs(100, 16, 0.25, 12);
        let l = Lengthscale::Isotropic(1.0);
        let dense = estimates(&FeatureMap::rbf(n, 1.0, 21).build(16).unwrap(), &pairs).unwrap();
        let fast = FeatureMap::rbf(n, 1.0, 22).with_projector(Projector::FastfoodRandom);
        let fast = estimates(&fast.build(16).unwrap(), &pairs).unwrap();
        let diff = dense.iter().zip(&fast).map(|(a, b)| (a - b).abs()).sum::<f64>() / 100.0;
        let se = pairs
            .iter()
            .map(|(a, b)| rbf_standard_error(a, b, &l, 1.0, n).unwrap())
            .sum::<f64>()
            / 100.0;
        assert!(diff <= 2.0 * se, "mean |diff| {diff}, standard error {se}");
    }
}
