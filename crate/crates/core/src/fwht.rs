//! Fast Walsh-Hadamard transform.
//!
//! Everything here uses the unnormalized Sylvester matrix
//! `H_2 = [[1, 1], [1, -1]]`, `H_2d = [[H_d, H_d], [H_d, -H_d]]`, so that
//! `H·H = d·I`. Callers that want an orthonormal transform scale by
//! `1/sqrt(d)` themselves; the Fastfood layer folds its normalization into a
//! per-block constant.

use crate::ops;
use crate::{Error, Real, Result};

/// Largest dimension the dense oracle agrees to materialize.
pub const DENSE_LIMIT: usize = 4096;

/// A vector whose length is a power of two, ready for the transform.
#[derive(Debug, Clone, PartialEq)]
pub struct HadamardVector<T> {
    data: Vec<T>,
}

impl<T: Real> HadamardVector<T> {
    pub fn new(data: Vec<T>) -> Result<Self> {
        check_len(data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite entry in Hadamard operand".into()));
        }
        Ok(Self { data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Applies `H_d` in place and returns the transformed vector.
    pub fn transform(mut self) -> Self {
        fwht_unchecked(&mut self.data);
        self
    }

    pub fn into_inner(self) -> Vec<T> {
        self.data
    }
}

fn check_len(d: usize) -> Result<()> {
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::dim(format!(
            "Hadamard length must be a power of two, got {d}"
        )));
    }
    Ok(())
}

/// Computes `x ← H_d·x` in place. `x.len()` must be a power of two.
pub fn fwht_inplace<T: Real>(x: &mut [T]) -> Result<()> {
    check_len(x.len())?;
    fwht_unchecked(x);
    Ok(())
}

/// Radix-2 butterfly passes; the caller guarantees a power-of-two length.
pub(crate) fn fwht_unchecked<T: Real>(x: &mut [T]) {
    let d = x.len();
    debug_assert!(d.is_power_of_two());
    let mut half = 1;
    while half < d {
        for chunk in x.chunks_exact_mut(2 * half) {
            let (lo, hi) = chunk.split_at_mut(half);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*a, *b);
                *a = u + v;
                *b = u - v;
            }
        }
        half *= 2;
    }
    ops::record(op_count(d));
}

/// Additions and subtractions performed by one transform of length `d`.
pub fn op_count(d: usize) -> u64 {
    if d <= 1 {
        0
    } else {
        (d as u64) * u64::from(d.trailing_zeros())
    }
}

/// Explicit `H_d` built from the recursive block definition. Test oracle.
#[derive(Debug, Clone)]
pub struct DenseHadamard {
    d: usize,
    entries: Vec<i8>,
}

impl DenseHadamard {
    pub fn new(d: usize) -> Result<Self> {
        check_len(d)?;
        if d > DENSE_LIMIT {
            return Err(Error::Resource(format!(
                "refusing to materialize a {d}x{d} Hadamard matrix (limit {DENSE_LIMIT})"
            )));
        }
        let mut entries = vec![1i8];
        let mut size = 1;
        while size < d {
            let next = 2 * size;
            let mut grown = vec![0i8; next * next];
            for r in 0..size {
                for c in 0..size {
                    let h = entries[r * size + c];
                    grown[r * next + c] = h;
                    grown[r * next + c + size] = h;
                    grown[(r + size) * next + c] = h;
                    grown[(r + size) * next + c + size] = -h;
                }
            }
            entries = grown;
            size = next;
        }
        Ok(Self { d, entries })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn entry(&self, row: usize, col: usize) -> i8 {
        self.entries[row * self.d + col]
    }

    pub fn matvec<T: Real>(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.d {
            return Err(Error::dim(format!(
                "expected length {}, got {}",
                self.d,
                x.len()
            )));
        }
        Ok(self
            .entries
            .chunks_exact(self.d)
            .map(|row| {
                row.iter()
                    .zip(x)
                    .fold(T::zero(), |acc, (&h, &v)| if h > 0 { acc + v } else { acc - v })
            })
            .collect())
    }
}

/// Naive `O(d²)` product against a materialized `H_d`.
pub fn dense_hadamard_matvec<T: Real>(x: &[T]) -> Result<Vec<T>> {
    DenseHadamard::new(x.len())?.matvec(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        a.iter()
            .zip(b)
            .fold(0.0, |m, (x, y)| m.max((x - y).abs() / scale))
    }

    #[test]
    fn basis_vector_gives_first_column() {
        let mut x = [1.0f64, 0.0, 0.0, 0.0];
        fwht_inplace(&mut x).unwrap();
        assert_eq!(x, [1.0; 4]);
    }

    #[test]
    fn h2_by_hand() {
        let mut x = [1.0f64, 1.0];
        fwht_inplace(&mut x).unwrap();
        assert_eq!(x, [2.0, 0.0]);
    }

    #[test]
    fn rejects_non_power_of_two() {
        let mut x = [1.0f64; 6];
        assert!(matches!(fwht_inplace(&mut x), Err(Error::Dimension(_))));
        let mut empty: [f64; 0] = [];
        assert!(fwht_inplace(&mut empty).is_err());
        assert!(HadamardVector::new(vec![1.0f32; 3]).is_err());
    }

    #[test]
    fn rejects_non_finite_operand() {
        assert!(matches!(
            HadamardVector::new(vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn dense_oracle_examples() {
        assert_eq!(
            dense_hadamard_matvec(&[1.0f64, 0.0, 0.0, 0.0]).unwrap(),
            vec![1.0; 4]
        );
        let mut expect = vec![0.0f64; 8];
        expect[0] = 8.0;
        assert_eq!(dense_hadamard_matvec(&[1.0f64; 8]).unwrap(), expect);
    }

    #[test]
    fn dense_oracle_refuses_huge_matrices() {
        assert!(matches!(DenseHadamard::new(8192), Err(Error::Resource(_))));
    }

    #[test]
    fn dense_matrix_is_symmetric_and_orthogonal() {
        let h = DenseHadamard::new(16).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(h.entry(i, j), h.entry(j, i));
                let dot: i32 = (0..16)
                    .map(|k| i32::from(h.entry(i, k)) * i32::from(h.entry(j, k)))
                    .sum();
                assert_eq!(dot, if i == j { 16 } else { 0 });
            }
        }
    }

    #[test]
    fn matches_dense_oracle_d256() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(256);
        let x: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut fast = x.clone();
        fwht_inplace(&mut fast).unwrap();
        let dense = dense_hadamard_matvec(&x).unwrap();
        assert!(max_rel(&fast, &dense) < 1e-10);
    }

    #[test]
    fn single_precision_within_scaled_tolerance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(32);
        let x: Vec<f32> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut fast = x.clone();
        fwht_inplace(&mut fast).unwrap();
        let x64: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        let dense = dense_hadamard_matvec(&x64).unwrap();
        let fast64: Vec<f64> = fast.iter().map(|&v| f64::from(v)).collect();
        assert!(max_rel(&fast64, &dense) < f32::KERNEL_TOL);
    }

    #[test]
    fn counts_d_log_d_operations() {
        let mut x = vec![0.0f64; 1024];
        let (_, n) = ops::measure(|| fwht_inplace(&mut x).unwrap());
        assert_eq!(n, 1024 * 10);
    }

    fn pow2_vec() -> impl Strategy<Value = Vec<f64>> {
        (0u32..=12).prop_flat_map(|k| proptest::collection::vec(-10.0f64..10.0, 1usize << k))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn involution(x in pow2_vec()) {
            let d = x.len() as f64;
            let mut y = x.clone();
            fwht_inplace(&mut y).unwrap();
            fwht_inplace(&mut y).unwrap();
            let scaled: Vec<f64> = x.iter().map(|v| v * d).collect();
            prop_assert!(max_rel(&y, &scaled) < 1e-9);
        }

        #[test]
        fn parseval(x in pow2_vec()) {
            let d = x.len() as f64;
            let mut y = x.clone();
            fwht_inplace(&mut y).unwrap();
            let ex: f64 = x.iter().map(|v| v * v).sum();
            let ey: f64 = y.iter().map(|v| v * v).sum();
            prop_assert!((ey - d * ex).abs() <= 1e-9 * (d * ex).max(1e-300));
        }

        #[test]
        fn linearity(
            (x, y) in (0u32..=10).prop_flat_map(|k| {
                let n = 1usize << k;
                (proptest::collection::vec(-5.0f64..5.0, n), proptest::collection::vec(-5.0f64..5.0, n))
            }),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let mut combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            fwht_inplace(&mut combo).unwrap();
            let (mut hx, mut hy) = (x.clone(), y.clone());
            fwht_inplace(&mut hx).unwrap();
            fwht_inplace(&mut hy).unwrap();
            let sep: Vec<f64> = hx.iter().zip(&hy).map(|(u, v)| a * u + b * v).collect();
            let scale = x.iter().chain(&y).fold(1.0f64, |m, v| m.max(v.abs())) * x.len() as f64 * (a.abs() + b.abs() + 1.0);
            for (c, s) in combo.iter().zip(&sep) {
                prop_assert!((c - s).abs() <= 1e-10 * scale);
            }
        }
    }
}
