//! Row-wise softmax and the fused softmax + cross-entropy loss.
//!
//! The loss is evaluated as `logsumexp(z) - z[label]` so it stays exact even
//! when individual probabilities underflow.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Softmax over the last axis, stabilized by subtracting the row maximum.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 || *x.shape().last().unwrap() == 0 {
        return Err(Error::Shape("softmax needs a non-empty last axis".into()));
    }
    let width = *x.shape().last().unwrap();
    let rows = x.numel() / width;
    let mut y = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * width..(r + 1) * width];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut y[r * width..(r + 1) * width];
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::from_vec(x.shape(), y)
}

#[derive(Debug, Clone)]
pub struct CrossEntropyOutput {
    /// Mean negative log-likelihood over the batch.
    pub loss: f64,
    /// Softmax probabilities, same shape as the logits.
    pub probs: Tensor,
    /// Gradient of the mean loss with respect to the logits.
    pub grad_logits: Tensor,
}

/// Fused loss for logits `[B,K]` and one class label per row.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<CrossEntropyOutput> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!(
            "cross entropy expects logits [B,K], got {:?}",
            logits.shape()
        )));
    }
    let (batch, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch
        )));
    }
    if batch == 0 {
        return Err(Error::Shape("cross entropy needs a non-empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label(format!("label {bad} out of range for {k} classes")));
    }

    let probs = softmax(logits)?;
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    loss /= batch as f64;

    let mut grad = probs.clone();
    let inv_b = 1.0 / batch as f64;
    for (r, &label) in labels.iter().enumerate() {
        let row = &mut grad.data_mut()[r * k..(r + 1) * k];
        row[label] -= 1.0;
        for g in row.iter_mut() {
            *g *= inv_b;
        }
    }

    Ok(CrossEntropyOutput { loss, probs, grad_logits: grad })
}
