//! Batch normalization over the channel (last) axis.
//!
//! Statistics are computed per channel across every other axis. Training
//! mode normalizes with the current batch statistics and reports the updated
//! running estimates in the cache; the caller decides when to commit them,
//! which keeps the forward pass a pure function of its inputs. Inference
//! mode normalizes with the stored running estimates.

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::Tensor;

pub const BATCHNORM_EPSILON: f64 = 1e-3;
pub const BATCHNORM_MOMENTUM: f64 = 0.99;

/// Learnable scale/shift plus running statistics, all of width `C`.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormState {
    /// Identity transform: unit scale, zero shift, unit running variance.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Both the learnable pair and the running estimates count.
    pub fn param_count(&self) -> usize {
        4 * self.channels()
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    /// Updated running estimates; committed by the caller after the step.
    pub next_running_mean: Tensor,
    pub next_running_var: Tensor,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub gamma: Tensor,
    pub beta: Tensor,
}

fn check_channels(x: &Tensor, state: &BatchNormState) -> Result<usize> {
    let c = *x.shape().last().ok_or_else(|| {
        Error::Shape("batch norm input must have at least one axis".into())
    })?;
    if c != state.channels() {
        return Err(Error::Shape(format!(
            "batch norm has {} channels but input has {}",
            state.channels(),
            c
        )));
    }
    Ok(c)
}

pub fn batchnorm_forward(
    x: &Tensor,
    state: &BatchNormState,
    mode: Mode,
) -> Result<(Tensor, BatchNormCache)> {
    let c = check_channels(x, state)?;
    let rows = x.numel() / c;
    let xd = x.data();

    let (mean, var) = match mode {
        Mode::Train => {
            if rows == 0 {
                return Err(Error::Shape("batch norm needs at least one row".into()));
            }
            let mut mean = vec![0.0; c];
            for r in 0..rows {
                for ch in 0..c {
                    mean[ch] += xd[r * c + ch];
                }
            }
            for m in mean.iter_mut() {
                *m /= rows as f64;
            }
            let mut var = vec![0.0; c];
            for r in 0..rows {
                for ch in 0..c {
                    let d = xd[r * c + ch] - mean[ch];
                    var[ch] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= rows as f64;
            }
            (mean, var)
        }
        Mode::Infer => (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
        ),
    };

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BATCHNORM_EPSILON).sqrt()).collect();

    let mut norm = vec![0.0; x.numel()];
    let mut y = vec![0.0; x.numel()];
    let g = state.gamma.data();
    let b = state.beta.data();
    for r in 0..rows {
        for ch in 0..c {
            let idx = r * c + ch;
            let n = (xd[idx] - mean[ch]) * inv_std[ch];
            norm[idx] = n;
            y[idx] = g[ch] * n + b[ch];
        }
    }

    let (next_mean, next_var) = match mode {
        Mode::Train => {
            let m = BATCHNORM_MOMENTUM;
            let blend = |run: &Tensor, batch: &[f64]| {
                let mixed: Vec<f64> = run
                    .data()
                    .iter()
                    .zip(batch)
                    .map(|(&r0, &b0)| m * r0 + (1.0 - m) * b0)
                    .collect();
                Tensor::from_vec(&[c], mixed).expect("running stats are width C")
            };
            (blend(&state.running_mean, &mean), blend(&state.running_var, &var))
        }
        Mode::Infer => (state.running_mean.clone(), state.running_var.clone()),
    };

    Ok((
        Tensor::from_vec(x.shape(), y)?,
        BatchNormCache {
            normalized: Tensor::from_vec(x.shape(), norm)?,
            inv_std,
            next_running_mean: next_mean,
            next_running_var: next_var,
        },
    ))
}

/// Backward for the training-mode forward (batch statistics participate in
/// the gradient). Returns the input gradient and the parameter gradients.
pub fn batchnorm_backward(
    cache: &BatchNormCache,
    state: &BatchNormState,
    upstream: &Tensor,
) -> Result<(Tensor, BatchNormGrads)> {
    if upstream.shape() != cache.normalized.shape() {
        return Err(Error::Shape(format!(
            "batch norm upstream shape {:?} does not match cached {:?}",
            upstream.shape(),
            cache.normalized.shape()
        )));
    }
    let c = state.channels();
    let rows = upstream.numel() / c;
    let up = upstream.data();
    let norm = cache.normalized.data();
    let g = state.gamma.data();

    let mut sum_up = vec![0.0; c];
    let mut sum_up_norm = vec![0.0; c];
    for r in 0..rows {
        for ch in 0..c {
            let idx = r * c + ch;
            sum_up[ch] += up[idx];
            sum_up_norm[ch] += up[idx] * norm[idx];
        }
    }

    let n = rows as f64;
    let mut gx = vec![0.0; upstream.numel()];
    for r in 0..rows {
        for ch in 0..c {
            let idx = r * c + ch;
            gx[idx] = g[ch] * cache.inv_std[ch] / n
                * (n * up[idx] - sum_up[ch] - norm[idx] * sum_up_norm[ch]);
        }
    }

    Ok((
        Tensor::from_vec(upstream.shape(), gx)?,
        BatchNormGrads {
            gamma: Tensor::from_vec(&[c], sum_up_norm)?,
            beta: Tensor::from_vec(&[c], sum_up)?,
        },
    ))
}
