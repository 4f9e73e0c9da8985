//! The Adaptive Fastfood transform `ŷ = c · S H G Π H B x`.
//!
//! One [`FastfoodBlock`] is a `d×d` operator built from three diagonals
//! (`S`, `G`, `B`), a fixed permutation `Π`, and two implicit Hadamard
//! transforms. A [`FastfoodLayer`] zero-pads a `d_in`-dimensional input to
//! the next power of two `d_pad`, runs `m = ceil(n_out / d_pad)` independent
//! blocks on it, concatenates their outputs and keeps the first `n_out`.
//!
//! Each block carries a constant `c` (default `1/d_pad`) so that a block
//! with unit diagonals and the identity permutation is the identity map
//! (`H·H = d·I`). The diagonals never need to absorb a `d`-dependent factor.
//!
//! Storage is `O(n)` and a forward or backward pass costs `O(n log d)`:
//! per block, two transforms (`2·d·log₂d` additions) plus four `d`-length
//! elementwise passes (`B`, `G`, and the fused `c·S` product).
//!
//! The backward pass follows the adjoint recursion directly:
//!
//! ```text
//! ∂E/∂h_S  = c·S ∂E/∂y          ∂E/∂S = c · ∂E/∂y ∘ h_S
//! ∂E/∂h_H1 = H ∂E/∂h_S          ∂E/∂G = ∂E/∂h_H1 ∘ h_G
//! ∂E/∂h_G  = G ∂E/∂h_H1
//! ∂E/∂h_Π  = Πᵀ ∂E/∂h_G
//! ∂E/∂h_H2 = H ∂E/∂h_Π          ∂E/∂B = ∂E/∂h_H2 ∘ h_l
//! ∂E/∂h_l  = B ∂E/∂h_H2
//! ```
//!
//! Forward and backward take `&self`; all per-call state lives in a
//! caller-held [`BackwardWorkspace`], so a layer can serve concurrent
//! evaluations.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::fwht::{self, DenseHadamard};
use crate::ops;
use crate::{Error, Real, Result};

static NEXT_LAYER_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_LAYER_ID.fetch_add(1, Ordering::Relaxed)
}

/// Whether the diagonals are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Diagonals are sampled once and frozen.
    Random,
    /// Diagonals are learnable parameters.
    Adaptive,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Random => "random",
            Mode::Adaptive => "adaptive",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Mode::Random),
            "adaptive" => Ok(Mode::Adaptive),
            other => Err(Error::config("mode", format!("unknown Fastfood mode `{other}`"))),
        }
    }
}

/// How the `S` diagonal is drawn at initialisation.
///
/// Both rules rescale row `i` of the block so its norm is `σ·s_i` (the same
/// law as the row norm of an i.i.d. `N(0, σ²)` matrix when `s_i ~ χ_d`):
/// `S_i = s_i · sqrt(d) / ‖z‖` where `G = σ·z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleInit {
    /// `s_i ~ χ_d`, the RBF-consistent Fastfood scaling.
    Chi,
    /// `s_i = sqrt(d)`, every row normalised to exactly `σ·sqrt(d)`.
    Flat,
}

/// Sampling parameters shared by random and adaptive initialisation.
#[derive(Debug, Clone, PartialEq)]
pub struct FastfoodInit {
    /// Standard deviation of the Gaussian matrix the block imitates.
    pub sigma: f64,
    pub scale: ScaleInit,
    /// Dropout rate applied right after `Π`.
    pub dropout_pi: f64,
    /// Dropout rate applied right after `S`.
    pub dropout_s: f64,
}

impl Default for FastfoodInit {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            scale: ScaleInit::Chi,
            dropout_pi: 0.0,
            dropout_s: 0.0,
        }
    }
}

impl FastfoodInit {
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::config("sigma", "must be positive and finite"));
        }
        check_rate("dropout_pi", self.dropout_pi)?;
        check_rate("dropout_s", self.dropout_s)
    }
}

pub(crate) fn check_rate(field: &str, p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(field, format!("rate {p} outside [0, 1)")));
    }
    Ok(())
}

/// One `d_pad × d_pad` block `c · S H G Π H B`.
#[derive(Debug, Clone, PartialEq)]
pub struct FastfoodBlock<T> {
    scale: Vec<T>,
    gaussian: Vec<T>,
    signs: Vec<T>,
    perm: Vec<u32>,
    norm_const: T,
}

impl<T: Real> FastfoodBlock<T> {
    /// Assembles a block from explicit parts. `perm[i]` is the source index
    /// that lands in position `i`, i.e. `(Π v)_i = v[perm[i]]`.
    pub fn from_parts(
        scale: Vec<T>,
        gaussian: Vec<T>,
        signs: Vec<T>,
        perm: Vec<u32>,
        norm_const: T,
    ) -> Result<Self> {
        let d = scale.len();
        if d == 0 || !d.is_power_of_two() {
            return Err(Error::dim(format!("block dimension {d} is not a power of two")));
        }
        if gaussian.len() != d || signs.len() != d || perm.len() != d {
            return Err(Error::dim(format!(
                "diagonal/permutation lengths disagree: S={d}, G={}, B={}, perm={}",
                gaussian.len(),
                signs.len(),
                perm.len()
            )));
        }
        let mut seen = vec![false; d];
        for &p in &perm {
            let p = p as usize;
            if p >= d || std::mem::replace(&mut seen[p], true) {
                return Err(Error::dim("perm is not a bijection".to_string()));
            }
        }
        let all_finite = scale
            .iter()
            .chain(&gaussian)
            .chain(&signs)
            .all(|v| v.is_finite());
        if !all_finite || !norm_const.is_finite() {
            return Err(Error::Numeric("non-finite Fastfood parameter".into()));
        }
        Ok(Self {
            scale,
            gaussian,
            signs,
            perm,
            norm_const,
        })
    }

    /// Unit diagonals, identity permutation, the given constant.
    pub fn identity(d_pad: usize, norm_const: T) -> Result<Self> {
        Self::from_parts(
            vec![T::one(); d_pad],
            vec![T::one(); d_pad],
            vec![T::one(); d_pad],
            (0..d_pad as u32).collect(),
            norm_const,
        )
    }

    fn sample(d: usize, init: &FastfoodInit, rng: &mut ChaCha8Rng) -> Self {
        let signs: Vec<T> = (0..d)
            .map(|_| if rng.random::<bool>() { T::one() } else { -T::one() })
            .collect();
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let mut perm: Vec<u32> = (0..d as u32).collect();
        perm.shuffle(rng);
        let z_norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let root_d = (d as f64).sqrt();
        let scale = match init.scale {
            ScaleInit::Chi => {
                let chi2 = ChiSquared::new(d as f64).expect("positive degrees of freedom");
                (0..d)
                    .map(|_| T::from_f64_lossy(chi2.sample(rng).sqrt() * root_d / z_norm))
                    .collect()
            }
            ScaleInit::Flat => vec![T::from_f64_lossy(d as f64 / z_norm); d],
        };
        let gaussian = z.iter().map(|&v| T::from_f64_lossy(init.sigma * v)).collect();
        Self {
            scale,
            gaussian,
            signs,
            perm,
            norm_const: T::from_f64_lossy(1.0 / d as f64),
        }
    }

    pub fn d_pad(&self) -> usize {
        self.scale.len()
    }

    /// `S`.
    pub fn scale(&self) -> &[T] {
        &self.scale
    }

    /// `G`.
    pub fn gaussian(&self) -> &[T] {
        &self.gaussian
    }

    /// `B`.
    pub fn signs(&self) -> &[T] {
        &self.signs
    }

    pub fn perm(&self) -> &[u32] {
        &self.perm
    }

    pub fn norm_const(&self) -> T {
        self.norm_const
    }

    /// Mutable `(S, G, B)` in that order.
    pub fn diagonals_mut(&mut self) -> [&mut [T]; 3] {
        [&mut self.scale, &mut self.gaussian, &mut self.signs]
    }

    pub fn set_norm_const(&mut self, c: T) {
        self.norm_const = c;
    }

    /// `out ← Π v`.
    pub fn permute(&self, v: &[T], out: &mut [T]) {
        for (o, &p) in out.iter_mut().zip(&self.perm) {
            *o = v[p as usize];
        }
    }

    /// `out ← Πᵀ v`, the adjoint of [`permute`](Self::permute).
    pub fn permute_adjoint(&self, v: &[T], out: &mut [T]) {
        for (&x, &p) in v.iter().zip(&self.perm) {
            out[p as usize] = x;
        }
    }
}

/// Cached partial products of one block for every sample in the batch,
/// stored sample-major (`batch × d_pad`).
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    /// `B h_l`.
    pub h_h2: Vec<T>,
    /// `H B h_l`.
    pub h_pi: Vec<T>,
    /// `Π H B h_l`, after the optional post-`Π` dropout.
    pub h_g: Vec<T>,
    /// `G Π H B h_l`.
    pub h_h1: Vec<T>,
    /// `H G Π H B h_l`.
    pub h_s: Vec<T>,
    /// Inverted-dropout multipliers applied after `Π`.
    pub mask_pi: Option<Vec<T>>,
    /// Inverted-dropout multipliers applied after `S`.
    pub mask_s: Option<Vec<T>>,
}

/// Everything [`FastfoodLayer::backward`] needs from the matching forward.
#[derive(Debug, Clone)]
pub struct BackwardWorkspace<T> {
    layer_id: u64,
    generation: u64,
    batch: usize,
    d_pad: usize,
    h_l: Vec<T>,
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> BackwardWorkspace<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Zero-padded inputs, `batch × d_pad`.
    pub fn padded_input(&self) -> &[T] {
        &self.h_l
    }

    pub fn blocks(&self) -> &[BlockCache<T>] {
        &self.blocks
    }

    /// Row `sample` of a `batch × d_pad` cache vector.
    pub fn row<'a>(&self, v: &'a [T], sample: usize) -> &'a [T] {
        &v[sample * self.d_pad..(sample + 1) * self.d_pad]
    }
}

/// Gradients of one block's diagonals, summed over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGradients<T> {
    pub d_scale: Vec<T>,
    pub d_gaussian: Vec<T>,
    pub d_signs: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastfoodGradients<T> {
    pub blocks: Vec<BlockGradients<T>>,
    /// `batch × d_in`.
    pub dx: Vec<T>,
}

/// Learnable and stored scalar counts of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// Trainable scalars: `3·m·d_pad` adaptive, `0` random.
    pub learnable: usize,
    /// Fixed scalars kept in memory: the permutations, plus the diagonals
    /// in random mode.
    pub constants: usize,
    /// `3·m·d_pad` in either mode.
    pub diagonals: usize,
}

/// `d_in → n_out` stack of Fastfood blocks.
#[derive(Debug)]
pub struct FastfoodLayer<T> {
    id: u64,
    generation: u64,
    d_in: usize,
    n_out: usize,
    mode: Mode,
    dropout_pi: f64,
    dropout_s: f64,
    blocks: Vec<FastfoodBlock<T>>,
}

impl<T: Clone> Clone for FastfoodLayer<T> {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            generation: 0,
            d_in: self.d_in,
            n_out: self.n_out,
            mode: self.mode,
            dropout_pi: self.dropout_pi,
            dropout_s: self.dropout_s,
            blocks: self.blocks.clone(),
        }
    }
}

impl<T: PartialEq> PartialEq for FastfoodLayer<T> {
    fn eq(&self, other: &Self) -> bool {
        self.d_in == other.d_in
            && self.n_out == other.n_out
            && self.mode == other.mode
            && self.dropout_pi == other.dropout_pi
            && self.dropout_s == other.dropout_s
            && self.blocks == other.blocks
    }
}

/// Smallest power of two `≥ d`.
pub fn padded_dim(d: usize) -> usize {
    d.next_power_of_two()
}

fn check_dims(d_in: usize, n_out: usize) -> Result<()> {
    if d_in == 0 || n_out == 0 {
        return Err(Error::dim(format!(
            "Fastfood dimensions must be positive (d_in={d_in}, n_out={n_out})"
        )));
    }
    Ok(())
}

impl<T: Real> FastfoodLayer<T> {
    /// Frozen random diagonals: `B` Rademacher, `G = σ·z` with `z` standard
    /// normal, `Π` a uniform shuffle, `S` per `init.scale`. Deterministic in
    /// `seed`.
    pub fn init_random(d_in: usize, n_out: usize, seed: u64, init: &FastfoodInit) -> Result<Self> {
        Self::init(d_in, n_out, seed, init, Mode::Random)
    }

    /// Same sampling as [`init_random`](Self::init_random) with the
    /// diagonals marked learnable.
    pub fn init_adaptive(
        d_in: usize,
        n_out: usize,
        seed: u64,
        init: &FastfoodInit,
    ) -> Result<Self> {
        Self::init(d_in, n_out, seed, init, Mode::Adaptive)
    }

    fn init(d_in: usize, n_out: usize, seed: u64, init: &FastfoodInit, mode: Mode) -> Result<Self> {
        check_dims(d_in, n_out)?;
        init.validate()?;
        let d_pad = padded_dim(d_in);
        let m = n_out.div_ceil(d_pad);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..m)
            .map(|_| FastfoodBlock::sample(d_pad, init, &mut rng))
            .collect();
        Ok(Self {
            id: fresh_id(),
            generation: 0,
            d_in,
            n_out,
            mode,
            dropout_pi: init.dropout_pi,
            dropout_s: init.dropout_s,
            blocks,
        })
    }

    /// Builds a layer around explicit blocks (checkpoint loading, tests).
    pub fn from_blocks(
        d_in: usize,
        n_out: usize,
        mode: Mode,
        blocks: Vec<FastfoodBlock<T>>,
    ) -> Result<Self> {
        check_dims(d_in, n_out)?;
        let d_pad = padded_dim(d_in);
        if let Some(b) = blocks.iter().find(|b| b.d_pad() != d_pad) {
            return Err(Error::dim(format!(
                "block has d_pad={} but d_in={d_in} pads to {d_pad}",
                b.d_pad()
            )));
        }
        if blocks.len() * d_pad < n_out || blocks.is_empty() {
            return Err(Error::dim(format!(
                "{} blocks of {d_pad} cannot produce {n_out} outputs",
                blocks.len()
            )));
        }
        Ok(Self {
            id: fresh_id(),
            generation: 0,
            d_in,
            n_out,
            mode,
            dropout_pi: 0.0,
            dropout_s: 0.0,
            blocks,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn d_pad(&self) -> usize {
        self.blocks[0].d_pad()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn dropout(&self) -> (f64, f64) {
        (self.dropout_pi, self.dropout_s)
    }

    pub fn set_dropout(&mut self, after_pi: f64, after_s: f64) -> Result<()> {
        check_rate("dropout_pi", after_pi)?;
        check_rate("dropout_s", after_s)?;
        self.dropout_pi = after_pi;
        self.dropout_s = after_s;
        Ok(())
    }

    pub fn blocks(&self) -> &[FastfoodBlock<T>] {
        &self.blocks
    }

    /// Mutable access to the blocks. Invalidates outstanding workspaces.
    pub fn blocks_mut(&mut self) -> &mut [FastfoodBlock<T>] {
        self.generation += 1;
        &mut self.blocks
    }

    pub fn param_count(&self) -> ParamCount {
        let d = self.d_pad();
        let m = self.blocks.len();
        let diagonals = 3 * m * d;
        match self.mode {
            Mode::Adaptive => ParamCount {
                learnable: diagonals,
                constants: m * d,
                diagonals,
            },
            Mode::Random => ParamCount {
                learnable: 0,
                constants: diagonals + m * d,
                diagonals,
            },
        }
    }

    /// Operations [`forward`](Self::forward) records per sample.
    pub fn forward_op_count(&self) -> u64 {
        let d = self.d_pad() as u64;
        self.blocks.len() as u64 * (4 * d + 2 * fwht::op_count(self.d_pad()))
    }

    /// Deterministic evaluation (no dropout). `x` is `batch × d_in`,
    /// row-major; the output is `batch × n_out`.
    pub fn forward(&self, x: &[T], batch: usize) -> Result<(Vec<T>, BackwardWorkspace<T>)> {
        self.run_forward(x, batch, None)
    }

    /// Training-mode evaluation: the configured dropout rates are applied
    /// with masks drawn from `rng` and recorded in the workspace.
    pub fn forward_train(
        &self,
        x: &[T],
        batch: usize,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<T>, BackwardWorkspace<T>)> {
        self.run_forward(x, batch, Some(rng))
    }

    fn run_forward(
        &self,
        x: &[T],
        batch: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(Vec<T>, BackwardWorkspace<T>)> {
        if x.len() != batch * self.d_in {
            return Err(Error::dim(format!(
                "Fastfood input has {} values, expected batch {batch} × d_in {}",
                x.len(),
                self.d_in
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite Fastfood input".into()));
        }
        let d = self.d_pad();
        let mut h_l = vec![T::zero(); batch * d];
        for (dst, src) in h_l.chunks_exact_mut(d).zip(x.chunks_exact(self.d_in)) {
            dst[..self.d_in].copy_from_slice(src);
        }

        let mut y = vec![T::zero(); batch * self.n_out];
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let mut cache = BlockCache {
                h_h2: vec![T::zero(); batch * d],
                h_pi: vec![T::zero(); batch * d],
                h_g: vec![T::zero(); batch * d],
                h_h1: vec![T::zero(); batch * d],
                h_s: vec![T::zero(); batch * d],
                mask_pi: None,
                mask_s: None,
            };
            if let Some(rng) = rng.as_deref_mut() {
                cache.mask_pi = dropout_mask(self.dropout_pi, batch * d, rng);
                cache.mask_s = dropout_mask(self.dropout_s, batch * d, rng);
            }
            let out_lo = bi * d;
            let out_hi = ((bi + 1) * d).min(self.n_out);
            for s in 0..batch {
                let row = s * d..(s + 1) * d;
                let h2 = &mut cache.h_h2[row.clone()];
                for ((o, &v), &b) in h2.iter_mut().zip(&h_l[row.clone()]).zip(&block.signs) {
                    *o = b * v;
                }
                let pi = &mut cache.h_pi[row.clone()];
                pi.copy_from_slice(h2);
                fwht::fwht_unchecked(pi);
                let hg = &mut cache.h_g[row.clone()];
                block.permute(pi, hg);
                if let Some(mask) = &cache.mask_pi {
                    for (v, &m) in hg.iter_mut().zip(&mask[row.clone()]) {
                        *v *= m;
                    }
                }
                let h1 = &mut cache.h_h1[row.clone()];
                for ((o, &v), &g) in h1.iter_mut().zip(hg.iter()).zip(&block.gaussian) {
                    *o = g * v;
                }
                let hs = &mut cache.h_s[row.clone()];
                hs.copy_from_slice(h1);
                fwht::fwht_unchecked(hs);
                let c = block.norm_const;
                let dst = &mut y[s * self.n_out + out_lo..s * self.n_out + out_hi];
                for (j, o) in dst.iter_mut().enumerate() {
                    let mut v = c * block.scale[j] * hs[j];
                    if let Some(mask) = &cache.mask_s {
                        v *= mask[s * d + j];
                    }
                    *o = v;
                }
            }
            ops::record(4 * (batch * d) as u64);
            caches.push(cache);
        }
        let ws = BackwardWorkspace {
            layer_id: self.id,
            generation: self.generation,
            batch,
            d_pad: d,
            h_l,
            blocks: caches,
        };
        Ok((y, ws))
    }

    /// Gradients of `E` given `∂E/∂y` (`batch × n_out`), summed over the batch.
    pub fn backward(&self, ws: &BackwardWorkspace<T>, dy: &[T]) -> Result<FastfoodGradients<T>> {
        if ws.layer_id != self.id || ws.generation != self.generation {
            return Err(Error::State(
                "workspace does not belong to the latest forward pass of this layer".into(),
            ));
        }
        if ws.blocks.len() != self.blocks.len() {
            return Err(Error::State("workspace block count mismatch".into()));
        }
        let batch = ws.batch;
        if dy.len() != batch * self.n_out {
            return Err(Error::dim(format!(
                "upstream gradient has {} values, expected {batch} × {}",
                dy.len(),
                self.n_out
            )));
        }
        let d = self.d_pad();
        let mut dh_l = vec![T::zero(); batch * d];
        let mut grads = Vec::with_capacity(self.blocks.len());
        let mut dy_b = vec![T::zero(); d];
        let mut dh = vec![T::zero(); d];
        let mut dpi = vec![T::zero(); d];
        for (bi, (block, cache)) in self.blocks.iter().zip(&ws.blocks).enumerate() {
            let mut g = BlockGradients {
                d_scale: vec![T::zero(); d],
                d_gaussian: vec![T::zero(); d],
                d_signs: vec![T::zero(); d],
            };
            let out_lo = bi * d;
            let out_hi = ((bi + 1) * d).min(self.n_out);
            let c = block.norm_const;
            for s in 0..batch {
                let row = s * d..(s + 1) * d;
                dy_b.iter_mut().for_each(|v| *v = T::zero());
                dy_b[..out_hi - out_lo]
                    .copy_from_slice(&dy[s * self.n_out + out_lo..s * self.n_out + out_hi]);
                if let Some(mask) = &cache.mask_s {
                    for (v, &m) in dy_b.iter_mut().zip(&mask[row.clone()]) {
                        *v *= m;
                    }
                }
                // ∂E/∂S and ∂E/∂h_S
                for j in 0..d {
                    g.d_scale[j] += c * dy_b[j] * cache.h_s[s * d + j];
                    dh[j] = c * block.scale[j] * dy_b[j];
                }
                // ∂E/∂h_H1 = H ∂E/∂h_S
                fwht::fwht_unchecked(&mut dh);
                // ∂E/∂G and ∂E/∂h_G
                for j in 0..d {
                    g.d_gaussian[j] += dh[j] * cache.h_g[s * d + j];
                    dh[j] *= block.gaussian[j];
                }
                if let Some(mask) = &cache.mask_pi {
                    for (v, &m) in dh.iter_mut().zip(&mask[row.clone()]) {
                        *v *= m;
                    }
                }
                // ∂E/∂h_Π = Πᵀ ∂E/∂h_G, then ∂E/∂h_H2 = H ∂E/∂h_Π
                block.permute_adjoint(&dh, &mut dpi);
                fwht::fwht_unchecked(&mut dpi);
                // ∂E/∂B and ∂E/∂h_l
                let hl = &ws.h_l[row.clone()];
                let dl = &mut dh_l[row];
                for j in 0..d {
                    g.d_signs[j] += dpi[j] * hl[j];
                    dl[j] += block.signs[j] * dpi[j];
                }
            }
            ops::record(6 * (batch * d) as u64);
            grads.push(g);
        }
        let mut dx = vec![T::zero(); batch * self.d_in];
        for (dst, src) in dx.chunks_exact_mut(self.d_in).zip(dh_l.chunks_exact(d)) {
            dst.copy_from_slice(&src[..self.d_in]);
        }
        Ok(FastfoodGradients { blocks: grads, dx })
    }
}

fn dropout_mask<T: Real>(rate: f64, len: usize, rng: &mut dyn RngCore) -> Option<Vec<T>> {
    if rate <= 0.0 {
        return None;
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect(),
    )
}

/// Largest `d_pad` the dense oracle agrees to materialize.
pub const DENSE_ORACLE_LIMIT: usize = 1024;

/// Explicit `n_out × d_pad` matrix of the layer (row-major), obtained by
/// multiplying the five dense factor matrices of every block. Test oracle.
pub fn dense_fastfood_matrix<T: Real>(layer: &FastfoodLayer<T>) -> Result<Vec<T>> {
    let d = layer.d_pad();
    if d > DENSE_ORACLE_LIMIT {
        return Err(Error::Resource(format!(
            "refusing to materialize Fastfood blocks of size {d} (limit {DENSE_ORACLE_LIMIT})"
        )));
    }
    let hadamard = DenseHadamard::new(d)?;
    let h: Vec<T> = (0..d * d)
        .map(|i| T::from_f64_lossy(f64::from(hadamard.entry(i / d, i % d))))
        .collect();
    let diag = |v: &[T]| {
        let mut m = vec![T::zero(); d * d];
        for (i, &x) in v.iter().enumerate() {
            m[i * d + i] = x;
        }
        m
    };
    let mut out = Vec::with_capacity(layer.n_out() * d);
    for block in layer.blocks() {
        let mut p = vec![T::zero(); d * d];
        for (i, &src) in block.perm().iter().enumerate() {
            p[i * d + src as usize] = T::one();
        }
        let mut w = naive_matmul(&h, &diag(block.signs()), d);
        w = naive_matmul(&p, &w, d);
        w = naive_matmul(&diag(block.gaussian()), &w, d);
        w = naive_matmul(&h, &w, d);
        w = naive_matmul(&diag(block.scale()), &w, d);
        let c = block.norm_const();
        out.extend(w.into_iter().map(|v| v * c));
    }
    out.truncate(layer.n_out() * d);
    Ok(out)
}

fn naive_matmul<T: Real>(a: &[T], b: &[T], d: usize) -> Vec<T> {
    let mut c = vec![T::zero(); d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == T::zero() {
                continue;
            }
            for j in 0..d {
                c[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    c
}
