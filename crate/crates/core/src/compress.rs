//! Truncated-SVD compression of dense layers.
//!
//! A weight matrix `W = U Σ Vᵀ` is cut to its `k` leading singular triplets
//! and stored as `W ≈ Ũ Ṽᵀ` with `Ũ = U_k √Σ_k`, `Ṽ = V_k √Σ_k`. In a network
//! the dense layer becomes two chained dense layers (`x → Ṽᵀx → Ũ(Ṽᵀx) + b`)
//! that fine-tune with ordinary SGD.
//!
//! The main factorisation uses nalgebra's Golub–Kahan SVD. [`jacobi_svd`]
//! is an independent one-sided Jacobi implementation kept as an oracle.

use nalgebra::DMatrix;

use crate::nn::{Dense, Layer, Network};
use crate::{Error, Real, Result};

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.get(r, c);
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        f64::gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            &self.data,
            self.cols,
            1,
            &other.data,
            other.cols,
            1,
            0.0,
            &mut out.data,
            other.cols,
            1,
        );
        Ok(out)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖self − other‖_F`.
    pub fn distance(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

/// Rank-`k` factor pair with `W ≈ Ũ Ṽᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    /// `rows × k`
    pub u: Matrix,
    /// `cols × k`
    pub v: Matrix,
    pub k: usize,
    /// Every singular value of the original matrix, descending.
    pub singular_values: Vec<f64>,
}

impl LowRankFactors {
    pub fn reconstruct(&self) -> Matrix {
        self.u
            .matmul(&self.v.transpose())
            .expect("factor shapes agree by construction")
    }

    /// Stored scalars, `k(rows + cols)`.
    pub fn storage(&self) -> usize {
        self.k * (self.u.rows + self.v.rows)
    }

    /// Frobenius error predicted by Eckart–Young, `sqrt(Σ_{i>k} σ_i²)`.
    pub fn tail_error(&self) -> f64 {
        self.singular_values[self.k..]
            .iter()
            .map(|s| s * s)
            .sum::<f64>()
            .sqrt()
    }
}

fn check_finite(w: &Matrix) -> Result<()> {
    if w.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite matrix entry".into()));
    }
    if w.rows == 0 || w.cols == 0 {
        return Err(Error::dim("empty matrix"));
    }
    Ok(())
}

/// Keeps the `k` largest singular triplets, splitting `√σ` into both factors.
pub fn svd_truncate(w: &Matrix, k: usize) -> Result<LowRankFactors> {
    check_finite(w)?;
    let r = w.rows.min(w.cols);
    if k == 0 || k > r {
        return Err(Error::dim(format!("rank {k} outside 1..={r}")));
    }
    let svd = w.to_nalgebra().svd(true, true);
    let u_full = svd.u.ok_or_else(|| Error::Numeric("SVD did not return U".into()))?;
    let vt_full = svd.v_t.ok_or_else(|| Error::Numeric("SVD did not return Vᵀ".into()))?;
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();

    let mut u = Matrix::zeros(w.rows, k);
    let mut v = Matrix::zeros(w.cols, k);
    for j in 0..k {
        let root = sigma[j].sqrt();
        for i in 0..w.rows {
            u.data[i * k + j] = u_full[(i, j)] * root;
        }
        for i in 0..w.cols {
            v.data[i * k + j] = vt_full[(j, i)] * root;
        }
    }
    Ok(LowRankFactors {
        u,
        v,
        k,
        singular_values: sigma,
    })
}

/// Full SVD `(U, σ, V)` by one-sided (Hestenes) Jacobi rotations.
///
/// `U` is `rows × r` and `V` is `cols × r` with `r = min(rows, cols)`;
/// singular values come back in descending order. Slow and simple; meant as
/// an oracle for [`svd_truncate`].
pub fn jacobi_svd(w: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    check_finite(w)?;
    if w.rows < w.cols {
        let (u, s, v) = jacobi_svd(&w.transpose())?;
        return Ok((v, s, u));
    }
    let (m, n) = (w.rows, w.cols);
    // Work column-major: a[j] is column j.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| w.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();

    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                // Smaller root of t² + 2ζt − 1 = 0; ζ = 0 gives t = 1.
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for cols in [&mut a, &mut v] {
                    let (lo, hi) = cols.split_at_mut(q);
                    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (xp, xq) = (*x, *y);
                        *x = c * xp - s * xq;
                        *y = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = a.iter().enumerate().map(|(j, col)| (dot(col, col).sqrt(), j)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0));
    let mut u = Matrix::zeros(m, n);
    let mut vm = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (out, &(s, j)) in order.iter().enumerate() {
        sigma.push(s);
        for i in 0..m {
            u.data[i * n + out] = if s > 0.0 { a[j][i] / s } else { 0.0 };
        }
        for i in 0..n {
            vm.data[i * n + out] = v[j][i];
        }
    }
    Ok((u, sigma, vm))
}

/// Bookkeeping for one low-rank replacement. Counts are weight scalars only;
/// the bias is carried over unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionReport {
    pub layer: usize,
    pub k: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub fro_error: f64,
}

impl CompressionReport {
    pub fn ratio(&self) -> f64 {
        self.params_after as f64 / self.params_before as f64
    }
}

/// Replaces dense layer `index` (`d_in → d_out`) with
/// `dense(d_in → k, no bias) → dense(k → d_out, original bias)`.
pub fn replace_dense_with_lowrank<T: Real>(
    net: &mut Network<T>,
    index: usize,
    k: usize,
) -> Result<CompressionReport> {
    let dense = match net.layers().get(index) {
        Some(Layer::Dense(d)) => d.clone(),
        Some(other) => {
            return Err(Error::State(format!(
                "layer {index} is {}, not dense",
                other.kind()
            )))
        }
        None => return Err(Error::dim(format!("no layer {index}"))),
    };
    let w = Matrix::new(
        dense.d_out,
        dense.d_in,
        dense.weight.value.iter().map(|v| v.to_f64_lossy()).collect(),
    )?;
    let f = svd_truncate(&w, k)?;
    let fro_error = f.reconstruct().distance(&w);

    let cast = |m: &Matrix| m.data.iter().map(|&v| T::from_f64_lossy(v)).collect::<Vec<T>>();
    // First layer weight is Ṽᵀ (k × d_in); second is Ũ (d_out × k).
    let first = Dense::from_weights(dense.d_in, k, cast(&f.v.transpose()), None)?;
    let bias = dense.bias.as_ref().map(|b| b.value.clone());
    let second = Dense::from_weights(k, dense.d_out, cast(&f.u), bias)?;
    net.splice(index, vec![Layer::Dense(first), Layer::Dense(second)])?;
    Ok(CompressionReport {
        layer: index,
        k,
        params_before: w.data.len(),
        params_after: f.storage(),
        fro_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn full_rank_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (r, c) in [(7, 5), (5, 7), (6, 6)] {
            let w = random(r, c, &mut rng);
            let f = svd_truncate(&w, r.min(c)).unwrap();
            assert!(f.reconstruct().distance(&w) <= 1e-9 * w.frobenius());
        }
    }

    #[test]
    fn diagonal_by_hand() {
        let w = Matrix::new(3, 3, vec![3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let f = svd_truncate(&w, 2).unwrap();
        assert!((f.reconstruct().distance(&w) - 1.0).abs() < 1e-12);
        assert!((f.tail_error() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_out_of_range() {
        let w = Matrix::zeros(3, 2);
        assert!(matches!(svd_truncate(&w, 0), Err(Error::Dimension(_))));
        assert!(matches!(svd_truncate(&w, 3), Err(Error::Dimension(_))));
        let bad = Matrix::new(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(svd_truncate(&bad, 1), Err(Error::Numeric(_))));
    }

    #[test]
    fn error_matches_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(64, 48, &mut rng);
        let (_, sigma, _) = jacobi_svd(&w).unwrap();
        let oracle = sigma[12..].iter().map(|s| s * s).sum::<f64>().sqrt();
        let f = svd_truncate(&w, 12).unwrap();
        let err = f.reconstruct().distance(&w);
        assert!((err - oracle).abs() <= 1e-7 * oracle, "{err} vs {oracle}");
        assert!((err - f.tail_error()).abs() <= 1e-8 * err);
    }

    #[test]
    fn jacobi_factors_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (r, c) in [(9, 4), (4, 9)] {
            let w = random(r, c, &mut rng);
            let (u, s, v) = jacobi_svd(&w).unwrap();
            let mut us = u.clone();
            for i in 0..us.rows {
                for j in 0..us.cols {
                    us.data[i * us.cols + j] *= s[j];
                }
            }
            let back = us.matmul(&v.transpose()).unwrap();
            assert!(back.distance(&w) < 1e-12 * w.frobenius());
            assert!(s.windows(2).all(|p| p[0] >= p[1]));
        }
    }

    #[test]
    fn error_is_monotone_in_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(20, 15, &mut rng);
        let errs: Vec<f64> = (1..=15).map(|k| svd_truncate(&w, k).unwrap().tail_error()).collect();
        assert!(errs.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn factors_are_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(10, 8, &mut rng);
        let f = svd_truncate(&w, 4).unwrap();
        for j in 0..4 {
            let nu: f64 = (0..10).map(|i| f.u.get(i, j).powi(2)).sum();
            let nv: f64 = (0..8).map(|i| f.v.get(i, j).powi(2)).sum();
            assert!((nu - nv).abs() < 1e-10 * nu);
            assert!((nu - f.singular_values[j]).abs() < 1e-10 * nu);
        }
    }

    #[test]
    fn eckart_young_against_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (r, c) = (rng.random_range(4..12), rng.random_range(4..12));
            let k = rng.random_range(1..r.min(c));
            let w = random(r, c, &mut rng);
            let f = svd_truncate(&w, k).unwrap();
            let best = f.reconstruct().distance(&w);
            for _ in 0..1000 {
                let eps = 10f64.powf(rng.random_range(-4.0..0.0));
                let mut u = f.u.clone();
                let mut v = f.v.clone();
                for x in u.data.iter_mut().chain(v.data.iter_mut()) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x += eps * z;
                }
                let cand = u.matmul(&v.transpose()).unwrap();
                assert!(cand.distance(&w) >= best * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn replaced_layer_matches_truncated_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut dense = Dense::<f64>::new(12, 9, &mut rng).unwrap();
        dense.bias.as_mut().unwrap().value = (0..9).map(|_| rng.random()).collect();
        let w = Matrix::new(9, 12, dense.weight.value.clone()).unwrap();
        let bias = dense.bias.clone().unwrap().value;
        let mut net = Network::new(vec![12], vec![Layer::Dense(dense)], 0).unwrap();
        let report = replace_dense_with_lowrank(&mut net, 0, 4).unwrap();
        assert_eq!((report.params_before, report.params_after), (108, 84));
        assert_eq!(net.layers().len(), 2);

        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = net.predict(&Tensor::new(vec![1, 12], x.clone()).unwrap()).unwrap();
        let approx = svd_truncate(&w, 4).unwrap().reconstruct();
        for (i, &yi) in y.data().iter().enumerate() {
            let expect: f64 = (0..12).map(|j| approx.get(i, j) * x[j]).sum::<f64>() + bias[i];
            assert!((yi - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn replacement_rejects_non_dense_layers() {
        let mut net = crate::nn::models::lenet_reference::<f32>(0).unwrap();
        assert!(matches!(replace_dense_with_lowrank(&mut net, 0, 4), Err(Error::State(_))));
        let r = replace_dense_with_lowrank(&mut net, 4, 250).unwrap();
        assert_eq!(r.params_before, 400_000);
        assert_eq!(r.params_after, 325_000);
        assert!((r.ratio() - 0.8125).abs() < 1e-12);
    }
}
