use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Output of [`softmax_xent`].
#[derive(Clone, Debug, PartialEq)]
pub struct Xent {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Weighted cross-entropy of one example: `-weight * ln softmax(logits)[label]`
/// with gradient `weight * (probs - onehot(label))`.
pub fn softmax_xent(logits: &[f64], label: usize, weight: f64) -> Result<Xent> {
    if logits.len() < 2 {
        return Err(Error::invalid("softmax needs at least two classes"));
    }
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", logits.len())));
    }
    if !(weight > 0.0) || !weight.is_finite() {
        return Err(Error::invalid(format!("example weight must be positive, got {weight}")));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    let probs = softmax(logits);
    let loss = -weight * (logits[label] - max - log_sum);
    let mut grad: Vec<f64> = probs.iter().map(|p| weight * p).collect();
    grad[label] -= weight;
    Ok(Xent { loss, grad, probs })
}

/// Row-wise [`softmax_xent`] over a batch. Per-row losses and gradients are
/// multiplied by `scale` (use `1/n` for a batch mean). Returns the scaled
/// loss sum, the logit gradients and the probabilities.
pub fn batch_xent(logits: &Tensor, labels: &[usize], weights: &[f64], scale: f64) -> Result<(f64, Tensor, Tensor)> {
    let (n, k) = logits.shape();
    if labels.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "{n} logit rows but {} labels and {} weights",
            labels.len(),
            weights.len()
        )));
    }
    let mut grad = Tensor::zeros(n, k);
    let mut probs = Tensor::zeros(n, k);
    let mut total = 0.0;
    for i in 0..n {
        let x = softmax_xent(logits.row(i), labels[i], weights[i])?;
        total += scale * x.loss;
        for (g, v) in grad.row_mut(i).iter_mut().zip(&x.grad) {
            *g = scale * v;
        }
        probs.row_mut(i).copy_from_slice(&x.probs);
    }
    Ok((total, grad, probs))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let x = softmax_xent(&[0.3; 8], 5, 1.0).unwrap();
        assert!(x.probs.iter().all(|p| (p - 0.125).abs() < 1e-15));
        assert!((x.loss - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_value() {
        let x = softmax_xent(&[1f64.ln(), 3f64.ln()], 1, 1.0).unwrap();
        assert!((x.probs[0] - 0.25).abs() < 1e-15);
        assert!((x.probs[1] - 0.75).abs() < 1e-15);
        assert!((x.loss - 0.287_682_072_451_780_9).abs() < 1e-12);
    }

    #[test]
    fn weight_scales_loss_and_grad() {
        let l = [0.2, -1.0, 3.0];
        let a = softmax_xent(&l, 0, 1.0).unwrap();
        let b = softmax_xent(&l, 0, 2.0).unwrap();
        assert!((b.loss - 2.0 * a.loss).abs() < 1e-12);
        for (x, y) in a.grad.iter().zip(&b.grad) {
            assert!((y - 2.0 * x).abs() < 1e-12);
        }
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let x = softmax_xent(&[1000.0, -1000.0, 0.0], 1, 1.0).unwrap();
        assert!(x.loss.is_finite());
        assert!(x.probs.iter().all(|p| *p >= 0.0));
        assert!((x.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(softmax_xent(&[1.0], 0, 1.0).is_err());
        assert!(softmax_xent(&[1.0, 2.0], 2, 1.0).is_err());
        assert!(softmax_xent(&[1.0, 2.0], 0, 0.0).is_err());
        assert!(softmax_xent(&[f64::NAN, 2.0], 0, 1.0).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.5, 0.2]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.4, 0.0, 0.0, 0.0, 0.4, 0.2]), 2);
        assert_eq!(argmax(&[1.0; 8]), 0);
    }
}
