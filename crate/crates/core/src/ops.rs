//! Thread-local arithmetic operation counter.
//!
//! Kernels report the number of scalar additions/multiplications they
//! perform in bulk (one call per kernel invocation, not per operation), so
//! the counter costs nothing measurable. A matrix-vector multiply-add counts
//! as one operation per weight, the same convention the dense baseline uses.

use std::cell::Cell;

use crate::Real;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub fn record(n: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

pub fn current() -> u64 {
    COUNTER.with(Cell::get)
}

/// Runs `f` and returns its result with the operations it recorded on this
/// thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = current();
    let out = f();
    (out, current().wrapping_sub(before))
}

/// Row-by-row `y = W x` for a row-major `rows × x.len()` matrix; records
/// `rows · cols` operations. The dense baseline of the cost model.
pub fn dense_matvec<T: Real>(w: &[T], x: &[T], y: &mut [T]) {
    let cols = x.len();
    assert_eq!(w.len(), y.len() * cols, "dense_matvec: shape mismatch");
    for (yi, row) in y.iter_mut().zip(w.chunks_exact(cols)) {
        *yi = row.iter().zip(x).map(|(&a, &b)| a * b).sum();
    }
    record(w.len() as u64);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_matvec_counts_every_weight() {
        let w = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut y = [0.0; 2];
        let ((), n) = measure(|| dense_matvec(&w, &[1.0, 0.0, -1.0], &mut y));
        assert_eq!(y, [-2.0, -2.0]);
        assert_eq!(n, 6);
    }

    #[test]
    fn measure_is_scoped() {
        record(5);
        let ((), n) = measure(|| record(7));
        assert_eq!(n, 7);
    }
}
