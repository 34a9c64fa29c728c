//! Fully connected layer with a fused elementwise activation.

use crate::error::{Error, Result};
use crate::tensor::{outer_acc, vec_mat_acc, vec_mat_t_acc, Activation, Tensor};

/// Weight is stored `[In, Out]` so a row of the batch multiplies it directly.
#[derive(Debug, Clone)]
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseParams {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::Shape(format!(
                "dense weight must be rank 2 [In,Out], got {:?}",
                weight.shape()
            )));
        }
        if bias.shape() != [weight.shape()[1]] {
            return Err(Error::Shape(format!(
                "dense bias shape {:?} does not match output width {}",
                bias.shape(),
                weight.shape()[1]
            )));
        }
        Ok(DenseParams { weight, bias, activation })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    pub input: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// `[B,In] -> [B,Out]`, `y = act(x W + b)`.
pub fn dense_forward(x: &Tensor, params: &DenseParams) -> Result<(Tensor, DenseCache)> {
    if x.rank() != 2 {
        return Err(Error::Shape(format!(
            "dense input must be rank 2 [B,In], got {:?}",
            x.shape()
        )));
    }
    let (batch, n_in) = (x.shape()[0], x.shape()[1]);
    if n_in != params.in_features() {
        return Err(Error::Shape(format!(
            "dense expects {} input features, got {}",
            params.in_features(),
            n_in
        )));
    }
    let n_out = params.out_features();
    let mut y = vec![0.0; batch * n_out];
    for b in 0..batch {
        let row = &mut y[b * n_out..(b + 1) * n_out];
        row.copy_from_slice(params.bias.data());
        vec_mat_acc(row, &x.data()[b * n_in..(b + 1) * n_in], &params.weight);
        for v in row.iter_mut() {
            *v = params.activation.apply_scalar(*v);
        }
    }
    let output = Tensor::from_vec(&[batch, n_out], y)?;
    Ok((output.clone(), DenseCache { input: x.clone(), output }))
}

pub fn dense_backward(
    cache: &DenseCache,
    params: &DenseParams,
    upstream: &Tensor,
) -> Result<(Tensor, DenseGrads)> {
    if upstream.shape() != cache.output.shape() {
        return Err(Error::Shape(format!(
            "dense upstream shape {:?} does not match output {:?}",
            upstream.shape(),
            cache.output.shape()
        )));
    }
    let (batch, n_in) = (cache.input.shape()[0], cache.input.shape()[1]);
    let n_out = params.out_features();

    // Chain through the activation using the saved outputs.
    let mut dz = vec![0.0; batch * n_out];
    for idx in 0..dz.len() {
        dz[idx] =
            upstream.data()[idx] * params.activation.grad_from_output(cache.output.data()[idx]);
    }

    let mut grad_w = Tensor::zeros(&[n_in, n_out]);
    let mut grad_b = vec![0.0; n_out];
    let mut gx = vec![0.0; batch * n_in];
    for b in 0..batch {
        let dz_row = &dz[b * n_out..(b + 1) * n_out];
        let x_row = &cache.input.data()[b * n_in..(b + 1) * n_in];
        outer_acc(&mut grad_w, x_row, dz_row);
        for (gb, &d) in grad_b.iter_mut().zip(dz_row) {
            *gb += d;
        }
        vec_mat_t_acc(&mut gx[b * n_in..(b + 1) * n_in], dz_row, &params.weight);
    }

    Ok((
        Tensor::from_vec(&[batch, n_in], gx)?,
        DenseGrads { weight: grad_w, bias: Tensor::from_vec(&[n_out], grad_b)? },
    ))
}
