//! Classification loss and scores.

use crate::error::{param_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean over rows of `−log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (b, c) = logits.dims2();
    if labels.len() != b {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: vec![b, c],
            right: vec![labels.len()],
        });
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(param_err(format!("label {y} out of range for {c} classes")));
        }
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.to_f64_lossy()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / b as f64)
}

/// Index of the first maximum.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1; a class absent from both predictions and
/// labels scores 0 and still counts toward the mean.
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths(preds, labels)?;
    if num_classes == 0 {
        return Err(param_err("macro_f1 needs at least one class"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(param_err(format!("class id out of range for {num_classes} classes")));
        }
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let sum: f64 = (0..num_classes)
        .map(|k| {
            let denom = 2 * tp[k] + fp[k] + fn_[k];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[k] as f64 / denom as f64
            }
        })
        .sum();
    Ok(sum / num_classes as f64)
}

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension {
            op: "metric",
            left: vec![preds.len()],
            right: vec![labels.len()],
        });
    }
    Ok(())
}
