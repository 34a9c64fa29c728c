//! LSTM cell with one fused bias per gate.
//!
//! Gate equations, with `σ` the logistic function:
//!
//! ```text
//! i = σ(x·W_i + h·U_i + b_i)        input gate
//! f = σ(x·W_f + h·U_f + b_f)        forget gate
//! g = tanh(x·W_g + h·U_g + b_g)     cell candidate
//! o = σ(x·W_o + h·U_o + b_o)        output gate
//! c' = f ⊙ c + i ⊙ g
//! h' = o ⊙ tanh(c')
//! ```
//!
//! The four gate matrices are stored concatenated along the output axis in
//! the order `[i, f, g, o]`, so one input product and one recurrent product
//! cover all gates.

use crate::error::{Error, Result};
use crate::tensor::{outer_acc, sigmoid, vec_mat_acc, vec_mat_t_acc, Tensor};

#[derive(Debug, Clone)]
pub struct LstmParams {
    /// Input weights `[In, 4H]`, gate order `[i, f, g, o]`.
    pub wx: Tensor,
    /// Recurrent weights `[H, 4H]`, same gate order.
    pub wh: Tensor,
    /// One fused bias per gate, `[4H]`.
    pub bias: Tensor,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            wx: Tensor::zeros(&[input, 4 * hidden]),
            wh: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn input_size(&self) -> usize {
        self.wx.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.wh.shape()[0]
    }

    /// `4·((In + H)·H + H)`.
    pub fn param_count(&self) -> usize {
        self.wx.numel() + self.wh.numel() + self.bias.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_size();
        if self.wx.rank() != 2 || self.wh.rank() != 2 {
            return Err(Error::Shape("LSTM weights must be rank 2".into()));
        }
        if self.wx.shape()[1] != 4 * h || self.wh.shape()[1] != 4 * h {
            return Err(Error::Shape(format!(
                "LSTM gate width mismatch: wx {:?}, wh {:?}",
                self.wx.shape(),
                self.wh.shape()
            )));
        }
        if self.bias.shape() != [4 * h] {
            return Err(Error::Shape(format!(
                "LSTM bias must be [4H] = [{}], got {:?}",
                4 * h,
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

/// Hidden and cell state carried between timesteps.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState { h: Tensor::zeros(&[hidden]), c: Tensor::zeros(&[hidden]) }
    }
}

/// Everything the step backward needs, saved by the step forward.
#[derive(Debug, Clone)]
pub struct LstmStepCache {
    pub x: Tensor,
    pub h_prev: Tensor,
    pub c_prev: Tensor,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub wx: Tensor,
    pub wh: Tensor,
    pub bias: Tensor,
}

impl LstmGrads {
    pub fn zeros_like(p: &LstmParams) -> Self {
        LstmGrads {
            wx: Tensor::zeros(p.wx.shape()),
            wh: Tensor::zeros(p.wh.shape()),
            bias: Tensor::zeros(p.bias.shape()),
        }
    }
}

pub fn lstm_step(
    x: &Tensor,
    state: &LstmState,
    p: &LstmParams,
) -> Result<(LstmState, LstmStepCache)> {
    p.validate()?;
    let (n_in, h) = (p.input_size(), p.hidden_size());
    if x.shape() != [n_in] {
        return Err(Error::Shape(format!(
            "LSTM expects input [{n_in}], got {:?}",
            x.shape()
        )));
    }
    if state.h.shape() != [h] || state.c.shape() != [h] {
        return Err(Error::Shape(format!(
            "LSTM expects state [{h}], got h {:?}, c {:?}",
            state.h.shape(),
            state.c.shape()
        )));
    }

    // z = x·Wx + h·Wh + b, then split into the four gates.
    let mut z = p.bias.data().to_vec();
    vec_mat_acc(&mut z, x.data(), &p.wx);
    vec_mat_acc(&mut z, state.h.data(), &p.wh);

    let mut i = vec![0.0; h];
    let mut f = vec![0.0; h];
    let mut g = vec![0.0; h];
    let mut o = vec![0.0; h];
    for j in 0..h {
        i[j] = sigmoid(z[j]);
        f[j] = sigmoid(z[h + j]);
        g[j] = z[2 * h + j].tanh();
        o[j] = sigmoid(z[3 * h + j]);
    }

    let mut c_new = vec![0.0; h];
    let mut tanh_c = vec![0.0; h];
    let mut h_new = vec![0.0; h];
    for j in 0..h {
        c_new[j] = f[j] * state.c.data()[j] + i[j] * g[j];
        tanh_c[j] = c_new[j].tanh();
        h_new[j] = o[j] * tanh_c[j];
    }

    Ok((
        LstmState {
            h: Tensor::from_vec(&[h], h_new)?,
            c: Tensor::from_vec(&[h], c_new)?,
        },
        LstmStepCache {
            x: x.clone(),
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            i,
            f,
            g,
            o,
            tanh_c,
        },
    ))
}

/// Backward through one step. `dh` and `dc` are the gradients flowing into
/// the new state; parameter gradients accumulate into `grads` so the caller
/// can sum contributions across timesteps. Returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_step_backward(
    cache: &LstmStepCache,
    p: &LstmParams,
    dh: &Tensor,
    dc: &Tensor,
    grads: &mut LstmGrads,
) -> Result<(Tensor, Tensor, Tensor)> {
    let h = p.hidden_size();
    if dh.shape() != [h] || dc.shape() != [h] {
        return Err(Error::Shape(format!(
            "LSTM upstream must be [{h}], got dh {:?}, dc {:?}",
            dh.shape(),
            dc.shape()
        )));
    }

    let mut dz = vec![0.0; 4 * h];
    let mut dc_prev = vec![0.0; h];
    for j in 0..h {
        let do_ = dh.data()[j] * cache.tanh_c[j];
        let dct = dc.data()[j] + dh.data()[j] * cache.o[j] * (1.0 - cache.tanh_c[j].powi(2));
        let di = dct * cache.g[j];
        let df = dct * cache.c_prev.data()[j];
        let dg = dct * cache.i[j];
        dc_prev[j] = dct * cache.f[j];

        dz[j] = di * cache.i[j] * (1.0 - cache.i[j]);
        dz[h + j] = df * cache.f[j] * (1.0 - cache.f[j]);
        dz[2 * h + j] = dg * (1.0 - cache.g[j].powi(2));
        dz[3 * h + j] = do_ * cache.o[j] * (1.0 - cache.o[j]);
    }

    outer_acc(&mut grads.wx, cache.x.data(), &dz);
    outer_acc(&mut grads.wh, cache.h_prev.data(), &dz);
    for (gb, &d) in grads.bias.data_mut().iter_mut().zip(&dz) {
        *gb += d;
    }

    let mut dx = vec![0.0; p.input_size()];
    vec_mat_t_acc(&mut dx, &dz, &p.wx);
    let mut dh_prev = vec![0.0; h];
    vec_mat_t_acc(&mut dh_prev, &dz, &p.wh);

    Ok((
        Tensor::from_vec(&[p.input_size()], dx)?,
        Tensor::from_vec(&[h], dh_prev)?,
        Tensor::from_vec(&[h], dc_prev)?,
    ))
}
