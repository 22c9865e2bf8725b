use super::Grid;
use crate::error::{invalid_arg, Result};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Grid) -> Grid {
    let mut out = logits.clone();
    let n = logits.cols();
    for r in 0..logits.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut().take(n) {
            *v /= z;
        }
    }
    out
}

/// Mean negative log-likelihood of `targets` under the row softmax of
/// `logits`. Returns the loss and the class probabilities.
pub fn softmax_cross_entropy(logits: &Grid, targets: &[usize]) -> Result<(f64, Grid)> {
    if logits.shape().len() != 2 {
        return Err(invalid_arg!("logits must be [batch, classes], got {:?}", logits.shape()));
    }
    let (b, n) = (logits.rows(), logits.cols());
    if targets.len() != b {
        return Err(invalid_arg!("{} targets for batch of {b}", targets.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= n) {
        return Err(invalid_arg!("target {t} out of range for {n} classes"));
    }
    if !logits.is_finite() {
        return Err(crate::Error::Numeric("non-finite logits".into()));
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
    }
    Ok((loss / b as f64, probs))
}

/// Gradient of the mean cross-entropy with respect to the logits:
/// `(probs - onehot) / batch`.
pub fn softmax_cross_entropy_backward(probs: &Grid, targets: &[usize]) -> Grid {
    let b = probs.rows() as f64;
    let mut g = probs.clone();
    for (r, &t) in targets.iter().enumerate() {
        g.row_mut(r)[t] -= 1.0;
    }
    g.map(|v| v / b)
}
