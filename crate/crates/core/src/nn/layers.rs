//! Layer implementations.
//!
//! Every layer evaluates through `&self` and returns an opaque [`Cache`]
//! alongside its output; `backward` consumes that cache and writes the
//! parameter gradients into the layer (overwriting, not accumulating).

use rand::{Rng, RngCore};

use super::tensor::Tensor;
use crate::fastfood::{self, BackwardWorkspace, FastfoodLayer, Mode};
use crate::{Error, Real, Result};

/// A learnable array with its gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub velocity: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![T::zero(); n],
            velocity: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Callback signature for [`Layer::visit_params`]: `(name, value, grad, velocity)`.
pub type ParamVisitor<'a, T> = dyn FnMut(&str, &mut [T], &[T], &mut [T]) + 'a;

/// Xavier/Glorot-uniform draw with fan-in scaling, `U(-a, a)`, `a = sqrt(3/fan_in)`.
pub fn xavier<T: Real>(n: usize, fan_in: usize, rng: &mut dyn RngCore) -> Vec<T> {
    let a = (3.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-a..a)))
        .collect()
}

// ---------------------------------------------------------------------------
// Convolution

/// 2-D cross-correlation with square kernels, NCHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out_channels × in_channels × kernel × kernel`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::dim("conv dimensions must be positive"));
        }
        let fan_in = in_channels * kernel * kernel;
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Param::new(xavier(out_channels * fan_in, fan_in, rng)),
            bias: Param::new(vec![T::zero(); out_channels]),
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = input else {
            return Err(Error::dim(format!("conv expects (C,H,W) input, got {input:?}")));
        };
        if *c != self.in_channels {
            return Err(Error::dim(format!(
                "conv expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::dim(format!(
                "conv kernel {} larger than padded input {hp}x{wp}",
                self.kernel
            )));
        }
        Ok(vec![
            self.out_channels,
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ])
    }

    fn geom(&self, x: &Tensor<T>) -> Result<ConvGeom> {
        let out = self.output_shape(x.sample_shape())?;
        let s = x.shape();
        Ok(ConvGeom {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            oh: out[1],
            ow: out[2],
            k: self.kernel,
            stride: self.stride,
            pad: self.pad,
        })
    }

    /// Returns the output and the batched patch matrix `[C·k·k, N·OH·OW]`.
    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let g = self.geom(x)?;
        let cols = im2col(x.data(), &g);
        let cols_w = g.n * g.positions();
        let mut out_cm = vec![T::zero(); self.out_channels * cols_w];
        T::gemm(
            self.out_channels,
            g.patch(),
            cols_w,
            T::one(),
            &self.weight.value,
            g.patch(),
            1,
            &cols,
            cols_w,
            1,
            T::zero(),
            &mut out_cm,
            cols_w,
            1,
        );
        let p = g.positions();
        let mut y = vec![T::zero(); g.n * self.out_channels * p];
        for f in 0..self.out_channels {
            let b = self.bias.value[f];
            for n in 0..g.n {
                let src = &out_cm[f * cols_w + n * p..f * cols_w + (n + 1) * p];
                let dst = &mut y[(n * self.out_channels + f) * p..(n * self.out_channels + f + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        let y = Tensor::new(vec![g.n, self.out_channels, g.oh, g.ow], y)?;
        Ok((y, cols))
    }

    fn backward(
        &mut self,
        x_shape: &[usize],
        cols: &[T],
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let out = self.output_shape(&x_shape[1..])?;
        let g = ConvGeom {
            n: x_shape[0],
            c: x_shape[1],
            h: x_shape[2],
            w: x_shape[3],
            oh: out[1],
            ow: out[2],
            k: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let f_n = self.out_channels;
        let p = g.positions();
        let cols_w = g.n * p;
        if dy.shape() != [g.n, f_n, g.oh, g.ow] {
            return Err(Error::dim(format!(
                "conv upstream gradient shape {:?} does not match output",
                dy.shape()
            )));
        }
        // Regroup dy from (N, F, P) to (F, N·P).
        let mut dy_cm = vec![T::zero(); f_n * cols_w];
        for n in 0..g.n {
            for f in 0..f_n {
                dy_cm[f * cols_w + n * p..f * cols_w + (n + 1) * p]
                    .copy_from_slice(&dy.data()[(n * f_n + f) * p..(n * f_n + f + 1) * p]);
            }
        }
        for (f, db) in self.bias.grad.iter_mut().enumerate() {
            *db = dy_cm[f * cols_w..(f + 1) * cols_w].iter().copied().sum();
        }
        // dW = dY · colsᵀ
        T::gemm(
            f_n,
            cols_w,
            g.patch(),
            T::one(),
            &dy_cm,
            cols_w,
            1,
            cols,
            1,
            cols_w,
            T::zero(),
            &mut self.weight.grad,
            g.patch(),
            1,
        );
        if !need_dx {
            return Ok(None);
        }
        // dcols = Wᵀ · dY
        let mut dcols = vec![T::zero(); g.patch() * cols_w];
        T::gemm(
            g.patch(),
            f_n,
            cols_w,
            T::one(),
            &self.weight.value,
            1,
            g.patch(),
            &dy_cm,
            cols_w,
            1,
            T::zero(),
            &mut dcols,
            cols_w,
            1,
        );
        let dx = col2im(&dcols, &g);
        Ok(Some(Tensor::new(x_shape.to_vec(), dx)?))
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let cols_w = g.n * p;
    let mut cols = vec![T::zero(); g.patch() * cols_w];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * cols_w..(row + 1) * cols_w];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        let dst = &mut dst_row[n * p + oh * g.ow..n * p + (oh + 1) * g.ow];
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                        if g.stride == 1 && g.pad == 0 {
                            dst.copy_from_slice(&src[kj..kj + g.ow]);
                        } else {
                            for (ow, d) in dst.iter_mut().enumerate() {
                                let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                                if iw >= 0 && iw < g.w as isize {
                                    *d = src[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let cols_w = g.n * p;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * cols_w..(row + 1) * cols_w];
                for n in 0..g.n {
                    let plane = &mut x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[n * p + oh * g.ow..n * p + (oh + 1) * g.ow];
                        let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for (ow, &v) in src.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Max pooling

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::dim("pool kernel and stride must be positive"));
        }
        Ok(Self { kernel, stride })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = input else {
            return Err(Error::dim(format!("pool expects (C,H,W) input, got {input:?}")));
        };
        if *h < self.kernel || *w < self.kernel {
            return Err(Error::dim(format!("pool kernel {} exceeds {h}x{w}", self.kernel)));
        }
        Ok(vec![
            *c,
            (h - self.kernel) / self.stride + 1,
            (w - self.kernel) / self.stride + 1,
        ])
    }

    fn forward<T: Real>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
        let out = self.output_shape(x.sample_shape())?;
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (out[1], out[2]);
        let mut y = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for plane in x.data().chunks_exact(h * w) {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = i * self.stride * w + j * self.stride;
                    for di in 0..self.kernel {
                        for dj in 0..self.kernel {
                            let idx = (i * self.stride + di) * w + j * self.stride + dj;
                            if plane[idx] > plane[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(plane[best]);
                    arg.push(best as u32);
                }
            }
        }
        Ok((Tensor::new(vec![n, c, oh, ow], y)?, arg))
    }

    fn backward<T: Real>(x_shape: &[usize], arg: &[u32], dy: &Tensor<T>) -> Result<Tensor<T>> {
        if dy.data().len() != arg.len() {
            return Err(Error::dim("pool upstream gradient size mismatch"));
        }
        let plane = x_shape[2] * x_shape[3];
        let per_out = arg.len() / (x_shape[0] * x_shape[1]);
        let mut dx = vec![T::zero(); x_shape.iter().product()];
        for (pi, (dys, args)) in dy
            .data()
            .chunks_exact(per_out)
            .zip(arg.chunks_exact(per_out))
            .enumerate()
        {
            let base = pi * plane;
            for (&g, &a) in dys.iter().zip(args) {
                dx[base + a as usize] += g;
            }
        }
        Tensor::new(x_shape.to_vec(), dx)
    }
}

// ---------------------------------------------------------------------------
// Dense

/// Affine map `y = W x + b` on flattened samples; `W` is `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::dim("dense dimensions must be positive"));
        }
        Ok(Self {
            d_in,
            d_out,
            weight: Param::new(xavier(d_in * d_out, d_in, rng)),
            bias: Some(Param::new(vec![T::zero(); d_out])),
        })
    }

    pub fn from_weights(d_in: usize, d_out: usize, weight: Vec<T>, bias: Option<Vec<T>>) -> Result<Self> {
        if weight.len() != d_in * d_out || bias.as_ref().is_some_and(|b| b.len() != d_out) {
            return Err(Error::dim(format!(
                "dense {d_in}->{d_out} weight/bias sizes do not match"
            )));
        }
        Ok(Self {
            d_in,
            d_out,
            weight: Param::new(weight),
            bias: bias.map(Param::new),
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let n: usize = input.iter().product();
        if n != self.d_in {
            return Err(Error::dim(format!(
                "dense expects {} inputs, got {input:?}",
                self.d_in
            )));
        }
        Ok(vec![self.d_out])
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Param::len)
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.output_shape(x.sample_shape())?;
        let n = x.batch();
        let mut y = vec![T::zero(); n * self.d_out];
        if let Some(b) = &self.bias {
            for row in y.chunks_exact_mut(self.d_out) {
                row.copy_from_slice(&b.value);
            }
        }
        T::gemm(
            n,
            self.d_in,
            self.d_out,
            T::one(),
            x.data(),
            self.d_in,
            1,
            &self.weight.value,
            1,
            self.d_in,
            T::one(),
            &mut y,
            self.d_out,
            1,
        );
        Tensor::new(vec![n, self.d_out], y)
    }

    fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let n = x.batch();
        if dy.shape() != [n, self.d_out] {
            return Err(Error::dim(format!(
                "dense upstream gradient shape {:?}, expected [{n}, {}]",
                dy.shape(),
                self.d_out
            )));
        }
        T::gemm(
            self.d_out,
            n,
            self.d_in,
            T::one(),
            dy.data(),
            1,
            self.d_out,
            x.data(),
            self.d_in,
            1,
            T::zero(),
            &mut self.weight.grad,
            self.d_in,
            1,
        );
        if let Some(b) = &mut self.bias {
            b.grad.iter_mut().for_each(|v| *v = T::zero());
            for row in dy.data().chunks_exact(self.d_out) {
                for (g, &v) in b.grad.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        if !need_dx {
            return Ok(None);
        }
        let mut dx = vec![T::zero(); n * self.d_in];
        T::gemm(
            n,
            self.d_out,
            self.d_in,
            T::one(),
            dy.data(),
            self.d_out,
            1,
            &self.weight.value,
            self.d_in,
            1,
            T::zero(),
            &mut dx,
            self.d_in,
            1,
        );
        Ok(Some(Tensor::new(x.shape().to_vec(), dx)?))
    }
}

// ---------------------------------------------------------------------------
// Fastfood

/// A [`FastfoodLayer`] with gradient and momentum storage for its diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct FastfoodNode<T> {
    pub layer: FastfoodLayer<T>,
    grads: Vec<[Vec<T>; 3]>,
    velocity: Vec<[Vec<T>; 3]>,
}

impl<T: Real> FastfoodNode<T> {
    pub fn new(layer: FastfoodLayer<T>) -> Self {
        let d = layer.d_pad();
        let zeros = || [vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d]];
        let m = layer.num_blocks();
        Self {
            layer,
            grads: (0..m).map(|_| zeros()).collect(),
            velocity: (0..m).map(|_| zeros()).collect(),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let n: usize = input.iter().product();
        if n != self.layer.d_in() {
            return Err(Error::dim(format!(
                "fastfood expects {} inputs, got {input:?}",
                self.layer.d_in()
            )));
        }
        Ok(vec![self.layer.n_out()])
    }

    /// Momentum buffers per block, `[S, G, B]`.
    pub fn velocity(&self) -> &[[Vec<T>; 3]] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut [[Vec<T>; 3]] {
        &mut self.velocity
    }
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted dropout: kept units are scaled by `1/(1-p)` at train time; the
/// layer is the identity in evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        fastfood::check_rate("dropout", rate)?;
        Ok(Self { rate })
    }
}

// ---------------------------------------------------------------------------
// Layer enum

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    MaxPool(MaxPool2d),
    Dense(Dense<T>),
    Fastfood(FastfoodNode<T>),
    Relu,
    Dropout(Dropout),
}

/// Per-call state a layer needs for its backward pass.
#[derive(Debug, Clone)]
pub enum Cache<T> {
    Conv { x_shape: Vec<usize>, cols: Vec<T> },
    Pool { x_shape: Vec<usize>, argmax: Vec<u32> },
    Dense { x: Tensor<T> },
    Fastfood { x_shape: Vec<usize>, ws: BackwardWorkspace<T> },
    Relu { y: Tensor<T> },
    Dropout { mask: Option<Vec<T>> },
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::MaxPool(_) => "maxpool",
            Layer::Dense(_) => "dense",
            Layer::Fastfood(_) => "fastfood",
            Layer::Relu => "relu",
            Layer::Dropout(_) => "dropout",
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv(l) => l.output_shape(input),
            Layer::MaxPool(l) => l.output_shape(input),
            Layer::Dense(l) => l.output_shape(input),
            Layer::Fastfood(l) => l.output_shape(input),
            Layer::Relu | Layer::Dropout(_) => Ok(input.to_vec()),
        }
    }

    /// Learnable scalars.
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(l) => l.weight.len() + l.bias.len(),
            Layer::Dense(l) => l.param_count(),
            Layer::Fastfood(l) => l.layer.param_count().learnable,
            _ => 0,
        }
    }

    /// Stored weight scalars whether or not they train: Fastfood diagonals
    /// count in both modes, permutations do not.
    pub fn weight_count(&self) -> usize {
        match self {
            Layer::Fastfood(l) => l.layer.param_count().diagonals,
            other => other.param_count(),
        }
    }

    /// Evaluates the layer. Dropout masks are drawn from `rng` when given;
    /// `None` means evaluation mode.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        match self {
            Layer::Conv(l) => {
                let (y, cols) = l.forward(x)?;
                Ok((
                    y,
                    Cache::Conv {
                        x_shape: x.shape().to_vec(),
                        cols,
                    },
                ))
            }
            Layer::MaxPool(l) => {
                let (y, argmax) = l.forward(x)?;
                Ok((
                    y,
                    Cache::Pool {
                        x_shape: x.shape().to_vec(),
                        argmax,
                    },
                ))
            }
            Layer::Dense(l) => Ok((l.forward(x)?, Cache::Dense { x: x.clone() })),
            Layer::Fastfood(node) => {
                node.output_shape(x.sample_shape())?;
                let n = x.batch();
                let (y, ws) = match rng {
                    Some(rng) => node.layer.forward_train(x.data(), n, rng)?,
                    None => node.layer.forward(x.data(), n)?,
                };
                Ok((
                    Tensor::new(vec![n, node.layer.n_out()], y)?,
                    Cache::Fastfood {
                        x_shape: x.shape().to_vec(),
                        ws,
                    },
                ))
            }
            Layer::Relu => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
                Ok((y.clone(), Cache::Relu { y }))
            }
            Layer::Dropout(d) => match rng {
                Some(rng) if d.rate > 0.0 => {
                    let keep = T::from_f64_lossy(1.0 / (1.0 - d.rate));
                    let mask: Vec<T> = (0..x.data().len())
                        .map(|_| if rng.random::<f64>() < d.rate { T::zero() } else { keep })
                        .collect();
                    let mut y = x.clone();
                    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    Ok((y, Cache::Dropout { mask: Some(mask) }))
                }
                _ => Ok((x.clone(), Cache::Dropout { mask: None })),
            },
        }
    }

    /// Writes parameter gradients into the layer and returns `∂E/∂x` when
    /// `need_dx` is set.
    pub fn backward(
        &mut self,
        cache: &Cache<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        match (self, cache) {
            (Layer::Conv(l), Cache::Conv { x_shape, cols }) => l.backward(x_shape, cols, dy, need_dx),
            (Layer::MaxPool(_), Cache::Pool { x_shape, argmax }) => {
                Ok(Some(MaxPool2d::backward(x_shape, argmax, dy)?))
            }
            (Layer::Dense(l), Cache::Dense { x }) => l.backward(x, dy, need_dx),
            (Layer::Fastfood(node), Cache::Fastfood { x_shape, ws }) => {
                let g = node.layer.backward(ws, dy.data())?;
                for (dst, src) in node.grads.iter_mut().zip(g.blocks) {
                    *dst = [src.d_scale, src.d_gaussian, src.d_signs];
                }
                Ok(Some(Tensor::new(x_shape.clone(), g.dx)?))
            }
            (Layer::Relu, Cache::Relu { y }) => {
                if dy.data().len() != y.data().len() {
                    return Err(Error::dim("relu upstream gradient size mismatch"));
                }
                let mut dx = dy.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                    if v <= T::zero() {
                        *g = T::zero();
                    }
                }
                Ok(Some(dx))
            }
            (Layer::Dropout(_), Cache::Dropout { mask }) => {
                let mut dx = dy.clone();
                if let Some(mask) = mask {
                    for (g, &m) in dx.data_mut().iter_mut().zip(mask) {
                        *g *= m;
                    }
                }
                Ok(Some(dx))
            }
            (layer, _) => Err(Error::State(format!(
                "cache does not belong to a {} layer",
                layer.kind()
            ))),
        }
    }

    /// Visits every learnable array as `(name, value, grad, velocity)`.
    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        match self {
            Layer::Conv(l) => {
                f("weight", &mut l.weight.value, &l.weight.grad, &mut l.weight.velocity);
                f("bias", &mut l.bias.value, &l.bias.grad, &mut l.bias.velocity);
            }
            Layer::Dense(l) => {
                f("weight", &mut l.weight.value, &l.weight.grad, &mut l.weight.velocity);
                if let Some(b) = &mut l.bias {
                    f("bias", &mut b.value, &b.grad, &mut b.velocity);
                }
            }
            Layer::Fastfood(node) if node.layer.mode() == Mode::Adaptive => {
                const NAMES: [&str; 3] = ["S", "G", "B"];
                let FastfoodNode {
                    layer,
                    grads,
                    velocity,
                } = node;
                for ((block, g), v) in layer.blocks_mut().iter_mut().zip(grads.iter()).zip(velocity.iter_mut()) {
                    for (i, diag) in block.diagonals_mut().into_iter().enumerate() {
                        f(NAMES[i], diag, &g[i], &mut v[i]);
                    }
                }
            }
            _ => {}
        }
    }
}
