use super::tensor::Tensor;
use crate::{Error, Real, Result};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax(z) - onehot(y)) / N` with respect to the logits.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let n = logits.batch();
    let k = logits.sample_len();
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::dim(format!("label {bad} out of range for {k} classes")));
    }
    let inv_n = T::one() / T::from_usize(n).expect("batch size");
    let mut grad = vec![T::zero(); n * k];
    let mut loss = T::zero();
    for ((z, g), &y) in logits.data().chunks_exact(k).zip(grad.chunks_exact_mut(k)).zip(labels) {
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (gi, &zi) in g.iter_mut().zip(z) {
            *gi = (zi - max).exp();
            sum += *gi;
        }
        loss += sum.ln() - (z[y] - max);
        for gi in g.iter_mut() {
            *gi = *gi / sum * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok((loss * inv_n, Tensor::new(vec![n, k], grad)?))
}

/// Index of the largest logit per sample.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.sample_len();
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
