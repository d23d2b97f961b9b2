use super::Tensor;
use crate::error::{Error, Result};

/// Row-wise softmax with max subtraction. `-inf` logits get probability 0.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut probs = logits.clone();
    let v = probs.cols();
    for row in probs.data_mut().chunks_mut(v) {
        softmax_in_place(row);
    }
    probs
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

#[derive(Clone, Debug)]
pub struct SoftmaxXent {
    /// Mean negative log-likelihood over unmasked rows.
    pub loss: f64,
    pub probs: Tensor,
    pub count: usize,
}

/// Softmax cross-entropy over the rows of `logits` where `mask` is true.
pub fn softmax_xent(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<SoftmaxXent> {
    let (rows, v) = (logits.rows(), logits.cols());
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::ShapeMismatch {
            left: logits.shape().to_vec(),
            right: vec![targets.len(), mask.len()],
            context: "softmax_xent logits vs targets/mask",
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::NoScorablePositions);
    }
    let probs = softmax_rows(logits);
    let mut nll = 0.0;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let t = targets[r] as usize;
        if t >= v {
            return Err(Error::InvalidArgument(format!(
                "target {t} outside vocabulary of {v}"
            )));
        }
        // log p = (z_t - max) - log Σ exp(z - max), computed directly for accuracy
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        nll -= (row[t] - max) - lse;
    }
    Ok(SoftmaxXent {
        loss: nll / count as f64,
        probs,
        count,
    })
}

/// `dL/dlogits = (probs - onehot(target)) / count` on unmasked rows, 0 elsewhere.
pub fn softmax_xent_backward(out: &SoftmaxXent, targets: &[u32], mask: &[bool]) -> Tensor {
    let mut grad = out.probs.clone();
    let v = grad.cols();
    let scale = 1.0 / out.count as f64;
    for (r, row) in grad.data_mut().chunks_mut(v).enumerate() {
        if mask[r] {
            row[targets[r] as usize] -= 1.0;
            row.iter_mut().for_each(|g| *g *= scale);
        } else {
            row.iter_mut().for_each(|g| *g = 0.0);
        }
    }
    grad
}
