//! Inverted dropout: surviving activations are rescaled by `1/(1-rate)` at
//! training time so inference is a plain identity.

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::Tensor;
use rand::Rng;

/// Per-element multipliers, either `0` or `1/(1-rate)` in training mode.
#[derive(Debug, Clone)]
pub struct DropoutCache {
    pub mask: Tensor,
}

pub fn validate_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Input(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

pub fn dropout_forward<R: Rng>(
    x: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, DropoutCache)> {
    validate_rate(rate)?;
    let mask = match mode {
        Mode::Infer => Tensor::filled(x.shape(), 1.0),
        Mode::Train if rate == 0.0 => Tensor::filled(x.shape(), 1.0),
        Mode::Train => {
            let keep = 1.0 - rate;
            let scale = 1.0 / keep;
            let vals = (0..x.numel())
                .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
                .collect();
            Tensor::from_vec(x.shape(), vals)?
        }
    };
    let mut y = x.clone();
    for (v, m) in y.data_mut().iter_mut().zip(mask.data()) {
        *v *= m;
    }
    Ok((y, DropoutCache { mask }))
}

pub fn dropout_backward(cache: &DropoutCache, upstream: &Tensor) -> Result<Tensor> {
    if upstream.shape() != cache.mask.shape() {
        return Err(Error::Shape(format!(
            "dropout upstream shape {:?} does not match mask {:?}",
            upstream.shape(),
            cache.mask.shape()
        )));
    }
    let mut gx = upstream.clone();
    for (v, m) in gx.data_mut().iter_mut().zip(cache.mask.data()) {
        *v *= m;
    }
    Ok(gx)
}
