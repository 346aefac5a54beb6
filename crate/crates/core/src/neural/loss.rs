use super::{NeuralError, Tensor};

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| z - lse).collect()
}

/// Cross-entropy of `softmax(logits)` against `target`, with its exact
/// logit gradient `softmax(logits) - one_hot(target)`.
pub fn softmax_cross_entropy(logits: &Tensor, target: usize) -> Result<(f64, Tensor), NeuralError> {
    if logits.shape().len() != 1 {
        return Err(NeuralError::Shape {
            layer: 0,
            kind: "softmax_cross_entropy",
            detail: format!("expected 1-D logits, got {:?}", logits.shape()),
        });
    }
    let n = logits.len();
    if target >= n {
        return Err(NeuralError::TargetOutOfRange { target, classes: n });
    }
    let z = logits.data();
    let loss = log_sum_exp(z) - z[target];
    let mut grad = softmax(z);
    grad[target] -= 1.0;
    Ok((loss, Tensor::vector(grad)))
}
