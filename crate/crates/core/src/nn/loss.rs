use super::Tensor;
use crate::error::{Error, Result};

/// Probabilities below this are treated as this value inside the log.
const PROB_FLOOR: f64 = 1e-12;

/// Cross-entropy `-ln p[label]` and its gradient with respect to `probs`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= probs.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let p = probs[label].max(PROB_FLOOR);
    let mut grad = vec![0.0; probs.len()];
    grad[label] = -1.0 / p;
    Ok((-p.ln(), grad))
}

/// Mean cross-entropy over a `[batch, classes]` probability tensor, with the
/// gradient of the mean.
pub fn cross_entropy_batch(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if probs.shape().len() != 2 || probs.shape()[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy_batch",
            &[labels.len(), *probs.shape().last().unwrap_or(&0)],
            probs.shape(),
        ));
    }
    let b = labels.len() as f64;
    let mut grad = Tensor::zeros(probs.shape());
    let n = probs.shape()[1];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let (loss, g) = cross_entropy(probs.row_slice(i), label)?;
        total += loss;
        for (dst, v) in grad.data_mut()[i * n..(i + 1) * n].iter_mut().zip(g) {
            *dst = v / b;
        }
    }
    Ok((total / b, grad))
}
