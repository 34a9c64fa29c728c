//! GRU cell with two bias vectors per gate and the reset gate applied after
//! the recurrent product.
//!
//! ```text
//! z  = σ(x·W_z + h·U_z + b_z + c_z)          update gate
//! r  = σ(x·W_r + h·U_r + b_r + c_r)          reset gate
//! h̃  = tanh(x·W_h + b_h + r ⊙ (h·U_h + c_h)) candidate
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```
//!
//! `b_*` are the input-side biases and `c_*` the recurrent-side biases; both
//! are learned, giving `3·(In·H + H² + 2H)` parameters. Because `c_h` sits
//! inside the reset product, the two bias vectors are not redundant for the
//! candidate gate.
//!
//! Gate matrices are concatenated along the output axis in the order
//! `[z, r, h̃]`.

use crate::error::{Error, Result};
use crate::tensor::{outer_acc, sigmoid, vec_mat_acc, vec_mat_t_acc, Tensor};

#[derive(Debug, Clone)]
pub struct GruParams {
    /// Input weights `[In, 3H]`, gate order `[z, r, h̃]`.
    pub wx: Tensor,
    /// Recurrent weights `[H, 3H]`, same gate order.
    pub wh: Tensor,
    /// Input-side biases `[3H]`.
    pub bias_x: Tensor,
    /// Recurrent-side biases `[3H]`.
    pub bias_h: Tensor,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            wx: Tensor::zeros(&[input, 3 * hidden]),
            wh: Tensor::zeros(&[hidden, 3 * hidden]),
            bias_x: Tensor::zeros(&[3 * hidden]),
            bias_h: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn input_size(&self) -> usize {
        self.wx.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.wh.shape()[0]
    }

    /// `3·(In·H + H² + 2H)`.
    pub fn param_count(&self) -> usize {
        self.wx.numel() + self.wh.numel() + self.bias_x.numel() + self.bias_h.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_size();
        if self.wx.rank() != 2 || self.wh.rank() != 2 {
            return Err(Error::Shape("GRU weights must be rank 2".into()));
        }
        if self.wx.shape()[1] != 3 * h || self.wh.shape()[1] != 3 * h {
            return Err(Error::Shape(format!(
                "GRU gate width mismatch: wx {:?}, wh {:?}",
                self.wx.shape(),
                self.wh.shape()
            )));
        }
        if self.bias_x.shape() != [3 * h] || self.bias_h.shape() != [3 * h] {
            return Err(Error::Shape(format!(
                "GRU biases must be [3H] = [{}], got {:?} and {:?}",
                3 * h,
                self.bias_x.shape(),
                self.bias_h.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GruStepCache {
    pub x: Tensor,
    pub h_prev: Tensor,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub htilde: Vec<f64>,
    /// Recurrent candidate pre-product `h·U_h + c_h`, needed for `dr`.
    pub sh: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GruGrads {
    pub wx: Tensor,
    pub wh: Tensor,
    pub bias_x: Tensor,
    pub bias_h: Tensor,
}

impl GruGrads {
    pub fn zeros_like(p: &GruParams) -> Self {
        GruGrads {
            wx: Tensor::zeros(p.wx.shape()),
            wh: Tensor::zeros(p.wh.shape()),
            bias_x: Tensor::zeros(p.bias_x.shape()),
            bias_h: Tensor::zeros(p.bias_h.shape()),
        }
    }
}

pub fn gru_step(x: &Tensor, h_prev: &Tensor, p: &GruParams) -> Result<(Tensor, GruStepCache)> {
    p.validate()?;
    let (n_in, h) = (p.input_size(), p.hidden_size());
    if x.shape() != [n_in] {
        return Err(Error::Shape(format!(
            "GRU expects input [{n_in}], got {:?}",
            x.shape()
        )));
    }
    if h_prev.shape() != [h] {
        return Err(Error::Shape(format!(
            "GRU expects state [{h}], got {:?}",
            h_prev.shape()
        )));
    }

    // Input-side and recurrent-side affine parts, kept separate because the
    // reset gate multiplies only the recurrent candidate part.
    let mut a = p.bias_x.data().to_vec();
    vec_mat_acc(&mut a, x.data(), &p.wx);
    let mut s = p.bias_h.data().to_vec();
    vec_mat_acc(&mut s, h_prev.data(), &p.wh);

    let mut z = vec![0.0; h];
    let mut r = vec![0.0; h];
    let mut htilde = vec![0.0; h];
    let mut sh = vec![0.0; h];
    let mut h_new = vec![0.0; h];
    for j in 0..h {
        z[j] = sigmoid(a[j] + s[j]);
        r[j] = sigmoid(a[h + j] + s[h + j]);
        sh[j] = s[2 * h + j];
        htilde[j] = (a[2 * h + j] + r[j] * sh[j]).tanh();
        h_new[j] = (1.0 - z[j]) * h_prev.data()[j] + z[j] * htilde[j];
    }

    Ok((
        Tensor::from_vec(&[h], h_new)?,
        GruStepCache { x: x.clone(), h_prev: h_prev.clone(), z, r, htilde, sh },
    ))
}

/// Backward through one step; parameter gradients accumulate into `grads`.
/// Returns `(dx, dh_prev)`.
pub fn gru_step_backward(
    cache: &GruStepCache,
    p: &GruParams,
    dh: &Tensor,
    grads: &mut GruGrads,
) -> Result<(Tensor, Tensor)> {
    let h = p.hidden_size();
    if dh.shape() != [h] {
        return Err(Error::Shape(format!(
            "GRU upstream must be [{h}], got {:?}",
            dh.shape()
        )));
    }

    // da feeds the input-side affine part, ds the recurrent-side part.
    let mut da = vec![0.0; 3 * h];
    let mut ds = vec![0.0; 3 * h];
    let mut dh_prev = vec![0.0; h];
    for j in 0..h {
        let (z, r, ht) = (cache.z[j], cache.r[j], cache.htilde[j]);
        let up = dh.data()[j];

        let dz = up * (ht - cache.h_prev.data()[j]);
        let dht = up * z;
        dh_prev[j] = up * (1.0 - z);

        let dht_pre = dht * (1.0 - ht * ht);
        let dr = dht_pre * cache.sh[j];
        let dsh = dht_pre * r;

        let dz_pre = dz * z * (1.0 - z);
        let dr_pre = dr * r * (1.0 - r);

        da[j] = dz_pre;
        da[h + j] = dr_pre;
        da[2 * h + j] = dht_pre;
        ds[j] = dz_pre;
        ds[h + j] = dr_pre;
        ds[2 * h + j] = dsh;
    }

    outer_acc(&mut grads.wx, cache.x.data(), &da);
    outer_acc(&mut grads.wh, cache.h_prev.data(), &ds);
    for (gb, &d) in grads.bias_x.data_mut().iter_mut().zip(&da) {
        *gb += d;
    }
    for (gb, &d) in grads.bias_h.data_mut().iter_mut().zip(&ds) {
        *gb += d;
    }

    let mut dx = vec![0.0; p.input_size()];
    vec_mat_t_acc(&mut dx, &da, &p.wx);
    vec_mat_t_acc(&mut dh_prev, &ds, &p.wh);

    Ok((
        Tensor::from_vec(&[p.input_size()], dx)?,
        Tensor::from_vec(&[h], dh_prev)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rng_tensor(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect()).unwrap()
    }

    fn random_params(n_in: usize, h: usize, seed: u64) -> GruParams {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        GruParams {
            wx: rng_tensor(&[n_in, 3 * h], &mut rng),
            wh: rng_tensor(&[h, 3 * h], &mut rng),
            bias_x: rng_tensor(&[3 * h], &mut rng),
            bias_h: rng_tensor(&[3 * h], &mut rng),
        }
    }

    /// Gate-by-gate scalar evaluation of the four equations.
    fn scalar_oracle(x: &Tensor, h_prev: &Tensor, p: &GruParams) -> Vec<f64> {
        let (n_in, h) = (p.input_size(), p.hidden_size());
        let input_pre = |col: usize| -> f64 {
            let mut s = p.bias_x.data()[col];
            for k in 0..n_in {
                s += x.data()[k] * p.wx.at(&[k, col]);
            }
            s
        };
        let recur_pre = |col: usize| -> f64 {
            let mut s = p.bias_h.data()[col];
            for k in 0..h {
                s += h_prev.data()[k] * p.wh.at(&[k, col]);
            }
            s
        };
        let mut h_new = vec![0.0; h];
        for j in 0..h {
            let z = sigmoid(input_pre(j) + recur_pre(j));
            let r = sigmoid(input_pre(h + j) + recur_pre(h + j));
            let htilde = (input_pre(2 * h + j) + r * recur_pre(2 * h + j)).tanh();
            h_new[j] = (1.0 - z) * h_prev.data()[j] + z * htilde;
        }
        h_new
    }

    #[test]
    fn zero_params_zero_state_stay_zero() {
        let p = GruParams::zeros(3, 2);
        let (h, _) = gru_step(&Tensor::filled(&[3], 5.0), &Tensor::zeros(&[2]), &p).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_halve_the_state() {
        // z = sigmoid(0) = 0.5 and the candidate is tanh(0) = 0, so the new
        // state is exactly half the old one.
        let p = GruParams::zeros(3, 4);
        let h_prev = Tensor::from_vec(&[4], vec![2.0, -4.0, 0.6, 8.0]).unwrap();
        let (h, _) = gru_step(&Tensor::filled(&[3], 9.0), &h_prev, &p).unwrap();
        assert_eq!(h.data(), &[1.0, -2.0, 0.3, 4.0]);
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(GruParams::zeros(256, 128).param_count(), 148_224);
        assert_eq!(GruParams::zeros(128, 128).param_count(), 99_072);
        assert_eq!(
            GruParams::zeros(256, 128).param_count(),
            3 * (256 * 128 + 128 * 128 + 2 * 128)
        );
    }

    #[test]
    fn step_matches_scalar_oracle_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for trial in 0..10 {
            let p = random_params(5, 4, 200 + trial);
            let x = rng_tensor(&[5], &mut rng);
            let h_prev = rng_tensor(&[4], &mut rng);
            let (h, _) = gru_step(&x, &h_prev, &p).unwrap();
            assert_eq!(h.data(), &scalar_oracle(&x, &h_prev, &p)[..], "trial {trial}");
        }
    }

    #[test]
    fn reset_gate_sits_inside_the_candidate() {
        // With the reset-after layout, the recurrent bias of the candidate
        // gate is scaled by r. A reset-before layout would add it unscaled,
        // so this input distinguishes the two.
        let h = 1;
        let mut p = GruParams::zeros(1, h);
        // Push r towards 0 with a large negative reset bias.
        p.bias_x.data_mut()[1] = -30.0;
        // Candidate recurrent bias 5: reset-after gives tanh(r*5) ~ tanh(0),
        // reset-before would give tanh(5 + ...) ~ 1.
        p.bias_h.data_mut()[2] = 5.0;
        let (out, _) = gru_step(&Tensor::zeros(&[1]), &Tensor::zeros(&[1]), &p).unwrap();
        // h' = 0.5 * tanh(r * 5) with r ~ 1e-13.
        assert!(out.data()[0].abs() < 1e-10, "got {}", out.data()[0]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = GruParams::zeros(3, 2);
        assert!(gru_step(&Tensor::zeros(&[4]), &Tensor::zeros(&[2]), &p).is_err());
        assert!(gru_step(&Tensor::zeros(&[3]), &Tensor::zeros(&[3]), &p).is_err());
    }

    #[test]
    fn gates_stay_in_bounds() {
        let p = random_params(6, 5, 41);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let x = rng_tensor(&[6], &mut rng).map(|v| v * 10.0);
        let h_prev = rng_tensor(&[5], &mut rng);
        let (_, cache) = gru_step(&x, &h_prev, &p).unwrap();
        for j in 0..5 {
            assert!(cache.z[j] > 0.0 && cache.z[j] < 1.0);
            assert!(cache.r[j] > 0.0 && cache.r[j] < 1.0);
            assert!(cache.htilde[j] >= -1.0 && cache.htilde[j] <= 1.0);
        }
    }

    #[test]
    fn step_backward_matches_finite_differences() {
        let p = random_params(5, 4, 51);
        let mut rng = ChaCha12Rng::seed_from_u64(52);
        let x = rng_tensor(&[5], &mut rng);
        let h_prev = rng_tensor(&[4], &mut rng);
        let w_loss = rng_tensor(&[4], &mut rng);

        let loss = |x: &Tensor, h_prev: &Tensor, p: &GruParams| -> f64 {
            let (h, _) = gru_step(x, h_prev, p).unwrap();
            h.data().iter().zip(w_loss.data()).map(|(a, b)| a * b).sum()
        };

        let (_, cache) = gru_step(&x, &h_prev, &p).unwrap();
        let mut grads = GruGrads::zeros_like(&p);
        let (dx, dh_prev) = gru_step_backward(&cache, &p, &w_loss, &mut grads).unwrap();

        let h = 1e-5;
        let check = |numeric: f64, analytic: f64, what: &str| {
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (numeric - analytic).abs() / denom <= 1e-4,
                "{what}: numeric {numeric}, analytic {analytic}"
            );
        };

        for idx in 0..x.numel() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[idx] += h;
            xm.data_mut()[idx] -= h;
            check(
                (loss(&xp, &h_prev, &p) - loss(&xm, &h_prev, &p)) / (2.0 * h),
                dx.data()[idx],
                "dx",
            );
        }
        for idx in 0..h_prev.numel() {
            let mut sp = h_prev.clone();
            let mut sm = h_prev.clone();
            sp.data_mut()[idx] += h;
            sm.data_mut()[idx] -= h;
            check(
                (loss(&x, &sp, &p) - loss(&x, &sm, &p)) / (2.0 * h),
                dh_prev.data()[idx],
                "dh_prev",
            );
        }
        let fields: [(&str, fn(&GruParams) -> &Tensor, fn(&mut GruParams) -> &mut Tensor, &Tensor); 4] = [
            ("wx", |p| &p.wx, |p| &mut p.wx, &grads.wx),
            ("wh", |p| &p.wh, |p| &mut p.wh, &grads.wh),
            ("bias_x", |p| &p.bias_x, |p| &mut p.bias_x, &grads.bias_x),
            ("bias_h", |p| &p.bias_h, |p| &mut p.bias_h, &grads.bias_h),
        ];
        for (name, get, get_mut, grad) in fields {
            for idx in 0..get(&p).numel() {
                let mut pp = p.clone();
                let mut pm = p.clone();
                get_mut(&mut pp).data_mut()[idx] += h;
                get_mut(&mut pm).data_mut()[idx] -= h;
                check(
                    (loss(&x, &h_prev, &pp) - loss(&x, &h_prev, &pm)) / (2.0 * h),
                    grad.data()[idx],
                    name,
                );
            }
        }
    }
}
