//! 3D max pooling over disjoint windows and global max pooling over all
//! spatial positions.
//!
//! Pool windows equal the stride (non-overlapping) and trailing voxels that
//! do not fill a full window are dropped (floor semantics). Backward routes
//! the upstream gradient only to the argmax position of each window; ties
//! go to the lowest flat index.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pooling window extents; stride is implicitly equal to the window.
#[derive(Debug, Clone, Copy)]
pub struct Pool3dConfig {
    pub window: [usize; 3],
}

impl Pool3dConfig {
    pub fn cubic(w: usize) -> Self {
        Pool3dConfig { window: [w, w, w] }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<[usize; 4]> {
        let [p, q, r] = self.window;
        if p == 0 || q == 0 || r == 0 {
            return Err(Error::Shape("pool window extents must be positive".into()));
        }
        if input[0] < p || input[1] < q || input[2] < r {
            return Err(Error::Shape(format!(
                "pool window {:?} larger than input {:?}",
                self.window,
                &input[..3]
            )));
        }
        Ok([input[0] / p, input[1] / q, input[2] / r, input[3]])
    }
}

/// Saved argmax positions (flat indices into the input) for backward.
#[derive(Debug, Clone)]
pub struct Pool3dCache {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

pub fn maxpool3d_forward(x: &Tensor, cfg: &Pool3dConfig) -> Result<(Tensor, Pool3dCache)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!(
            "pool input must be rank 4 [D1,D2,D3,C], got {:?}",
            x.shape()
        )));
    }
    let out_shape = cfg.output_shape(x.shape())?;
    let [o1, o2, o3, c] = out_shape;
    let (d2, d3) = (x.shape()[1], x.shape()[2]);
    let [p, q, r] = cfg.window;
    let xd = x.data();

    let mut y = vec![0.0; o1 * o2 * o3 * c];
    let mut argmax = vec![0usize; y.len()];
    for i in 0..o1 {
        for j in 0..o2 {
            for k in 0..o3 {
                let dst = ((i * o2 + j) * o3 + k) * c;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for di in 0..p {
                        for dj in 0..q {
                            for dk in 0..r {
                                let src = ((((i * p + di) * d2 + (j * q + dj)) * d3)
                                    + (k * r + dk))
                                    * c
                                    + ch;
                                // Strict > keeps the lowest flat index on ties
                                // (scan order is flat-index increasing).
                                if xd[src] > best {
                                    best = xd[src];
                                    best_at = src;
                                }
                            }
                        }
                    }
                    y[dst + ch] = best;
                    argmax[dst + ch] = best_at;
                }
            }
        }
    }

    Ok((
        Tensor::from_vec(&out_shape, y)?,
        Pool3dCache { input_shape: x.shape().to_vec(), argmax },
    ))
}

pub fn maxpool3d_backward(cache: &Pool3dCache, upstream: &Tensor) -> Result<Tensor> {
    if upstream.numel() != cache.argmax.len() {
        return Err(Error::Shape(format!(
            "pool upstream has {} elements, cache expects {}",
            upstream.numel(),
            cache.argmax.len()
        )));
    }
    let mut gx = Tensor::zeros(&cache.input_shape);
    for (&src, &u) in cache.argmax.iter().zip(upstream.data()) {
        gx.data_mut()[src] += u;
    }
    Ok(gx)
}

/// Per-channel maximum over all spatial positions: `[D1,D2,D3,C] -> [C]`.
pub fn global_maxpool3d(x: &Tensor) -> Result<Tensor> {
    let (y, _) = global_maxpool3d_forward(x)?;
    Ok(y)
}

pub fn global_maxpool3d_forward(x: &Tensor) -> Result<(Tensor, Pool3dCache)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!(
            "global pool input must be rank 4 [D1,D2,D3,C], got {:?}",
            x.shape()
        )));
    }
    let c = x.shape()[3];
    let spatial = x.numel() / c;
    let xd = x.data();
    let mut y = vec![f64::NEG_INFINITY; c];
    let mut argmax = vec![0usize; c];
    for s in 0..spatial {
        let row = &xd[s * c..(s + 1) * c];
        for (ch, &v) in row.iter().enumerate() {
            if v > y[ch] {
                y[ch] = v;
                argmax[ch] = s * c + ch;
            }
        }
    }
    Ok((
        Tensor::from_vec(&[c], y)?,
        Pool3dCache { input_shape: x.shape().to_vec(), argmax },
    ))
}

pub fn global_maxpool3d_backward(cache: &Pool3dCache, upstream: &Tensor) -> Result<Tensor> {
    if upstream.numel() != cache.argmax.len() {
        return Err(Error::Shape(format!(
            "global pool upstream has {} elements, cache expects {}",
            upstream.numel(),
            cache.argmax.len()
        )));
    }
    let mut gx = Tensor::zeros(&cache.input_shape);
    for (&src, &u) in cache.argmax.iter().zip(upstream.data()) {
        gx.data_mut()[src] += u;
    }
    Ok(gx)
}
