//! 3D convolution with valid padding and stride 1.
//!
//! Inputs are channel-last volumes `[D1, D2, D3, Cin]`, kernels are
//! `[L, M, N, Cin, Cout]`. Each output voxel is
//! `y(i,j,k,co) = Σ_l Σ_m Σ_n Σ_ci x(i+l, j+m, k+n, ci) · w(l,m,n,ci,co) + b(co)`.

use crate::error::{Error, Result};
use crate::tensor::{axpy, Tensor};

/// Parameters of one 3D convolution layer. Stride is fixed at 1 and padding
/// is always valid (no border fill).
#[derive(Debug, Clone)]
pub struct Conv3dParams {
    /// `[L, M, N, Cin, Cout]`
    pub kernel: Tensor,
    /// `[Cout]`
    pub bias: Tensor,
}

impl Conv3dParams {
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self> {
        if kernel.rank() != 5 {
            return Err(Error::Shape(format!(
                "conv kernel must be rank 5 [L,M,N,Cin,Cout], got {:?}",
                kernel.shape()
            )));
        }
        if bias.rank() != 1 || bias.shape()[0] != kernel.shape()[4] {
            return Err(Error::Shape(format!(
                "conv bias {:?} does not match kernel output channels {}",
                bias.shape(),
                kernel.shape()[4]
            )));
        }
        Ok(Conv3dParams { kernel, bias })
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[4]
    }

    /// Trainable parameter count: (L·M·N·Cin + 1) · Cout.
    pub fn param_count(&self) -> usize {
        self.kernel.numel() + self.bias.numel()
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Conv3dCache {
    pub input: Tensor,
}

#[derive(Debug, Clone)]
pub struct Conv3dGrads {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Output spatial shape for a valid, stride-1 convolution.
pub fn conv3d_output_shape(input: &[usize], kernel: &[usize]) -> Result<[usize; 4]> {
    let (d1, d2, d3, cin) = (input[0], input[1], input[2], input[3]);
    let (l, m, n, kcin, cout) = (kernel[0], kernel[1], kernel[2], kernel[3], kernel[4]);
    if cin != kcin {
        return Err(Error::Shape(format!(
            "conv input channels {cin} do not match kernel channels {kcin}"
        )));
    }
    if d1 < l || d2 < m || d3 < n {
        return Err(Error::Shape(format!(
            "conv input spatial extents {:?} smaller than kernel {:?}",
            &input[..3],
            &kernel[..3]
        )));
    }
    Ok([d1 - l + 1, d2 - m + 1, d3 - n + 1, cout])
}

pub fn conv3d_forward(x: &Tensor, p: &Conv3dParams) -> Result<(Tensor, Conv3dCache)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!(
            "conv input must be rank 4 [D1,D2,D3,Cin], got {:?}",
            x.shape()
        )));
    }
    let out_shape = conv3d_output_shape(x.shape(), p.kernel.shape())?;
    let [o1, o2, o3, cout] = out_shape;
    let (d2, d3, cin) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (l, m, n) = (p.kernel.shape()[0], p.kernel.shape()[1], p.kernel.shape()[2]);

    let xd = x.data();
    let kd = p.kernel.data();
    let bias = p.bias.data();
    let mut y = vec![0.0; o1 * o2 * o3 * cout];
    let mut acc = vec![0.0; cout];
    let tap = cin * cout; // kernel entries per (l,m,n) tap

    for i in 0..o1 {
        for j in 0..o2 {
            for k in 0..o3 {
                acc.copy_from_slice(bias);
                for dl in 0..l {
                    for dm in 0..m {
                        let row = (((i + dl) * d2 + (j + dm)) * d3 + k) * cin;
                        let kbase = (dl * m + dm) * n * tap;
                        for dn in 0..n {
                            let xrow = &xd[row + dn * cin..row + (dn + 1) * cin];
                            let krow = &kd[kbase + dn * tap..kbase + (dn + 1) * tap];
                            for (ci, &xv) in xrow.iter().enumerate() {
                                axpy(&mut acc, xv, &krow[ci * cout..(ci + 1) * cout]);
                            }
                        }
                    }
                }
                let dst = ((i * o2 + j) * o3 + k) * cout;
                y[dst..dst + cout].copy_from_slice(&acc);
            }
        }
    }

    let y = Tensor::from_vec(&out_shape, y)?;
    Ok((y, Conv3dCache { input: x.clone() }))
}

/// Analytic gradients of the convolution. `upstream` has the forward output
/// shape; returns the input gradient and the parameter gradients.
pub fn conv3d_backward(
    p: &Conv3dParams,
    cache: &Conv3dCache,
    upstream: &Tensor,
) -> Result<(Tensor, Conv3dGrads)> {
    let x = &cache.input;
    let out_shape = conv3d_output_shape(x.shape(), p.kernel.shape())?;
    if upstream.shape() != out_shape {
        return Err(Error::Shape(format!(
            "conv upstream shape {:?} does not match forward output {:?}",
            upstream.shape(),
            out_shape
        )));
    }
    let [o1, o2, o3, cout] = out_shape;
    let (d2, d3, cin) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (l, m, n) = (p.kernel.shape()[0], p.kernel.shape()[1], p.kernel.shape()[2]);

    let xd = x.data();
    let kd = p.kernel.data();
    let up = upstream.data();
    let mut gx = vec![0.0; x.numel()];
    let mut gk = vec![0.0; p.kernel.numel()];
    let mut gb = vec![0.0; cout];
    let tap = cin * cout;

    for i in 0..o1 {
        for j in 0..o2 {
            for k in 0..o3 {
                let upv = &up[((i * o2 + j) * o3 + k) * cout..((i * o2 + j) * o3 + k + 1) * cout];
                for (b, &u) in gb.iter_mut().zip(upv) {
                    *b += u;
                }
                for dl in 0..l {
                    for dm in 0..m {
                        let row = (((i + dl) * d2 + (j + dm)) * d3 + k) * cin;
                        let kbase = (dl * m + dm) * n * tap;
                        for dn in 0..n {
                            let xrow = &xd[row + dn * cin..row + (dn + 1) * cin];
                            let gxrow = &mut gx[row + dn * cin..row + (dn + 1) * cin];
                            let krow = &kd[kbase + dn * tap..kbase + (dn + 1) * tap];
                            let gkrow = &mut gk[kbase + dn * tap..kbase + (dn + 1) * tap];
                            for ci in 0..cin {
                                // dL/dw(l,m,n,ci,co) += x · upstream
                                axpy(&mut gkrow[ci * cout..(ci + 1) * cout], xrow[ci], upv);
                                // dL/dx(i+l,j+m,k+n,ci) += Σ_co upstream·w
                                let kr = &krow[ci * cout..(ci + 1) * cout];
                                let mut acc = 0.0;
                                for (&u, &w) in upv.iter().zip(kr) {
                                    acc += u * w;
                                }
                                gxrow[ci] += acc;
                            }
                        }
                    }
                }
            }
        }
    }

    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Conv3dGrads {
            kernel: Tensor::from_vec(p.kernel.shape(), gk)?,
            bias: Tensor::from_vec(&[cout], gb)?,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Six-nested-loop oracle straight from the defining sum.
    fn conv_oracle(x: &Tensor, p: &Conv3dParams) -> Tensor {
        let [o1, o2, o3, cout] = conv3d_output_shape(x.shape(), p.kernel.shape()).unwrap();
        let (l, m, n, cin) = (
            p.kernel.shape()[0],
            p.kernel.shape()[1],
            p.kernel.shape()[2],
            p.kernel.shape()[3],
        );
        let mut y = Tensor::zeros(&[o1, o2, o3, cout]);
        for i in 0..o1 {
            for j in 0..o2 {
                for k in 0..o3 {
                    for co in 0..cout {
                        let mut acc = p.bias.data()[co];
                        for dl in 0..l {
                            for dm in 0..m {
                                for dn in 0..n {
                                    for ci in 0..cin {
                                        acc += x.at(&[i + dl, j + dm, k + dn, ci])
                                            * p.kernel.at(&[dl, dm, dn, ci, co]);
                                    }
                                }
                            }
                        }
                        y.set(&[i, j, k, co], acc);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn all_ones_cube_sums_to_eight() {
        let x = Tensor::filled(&[2, 2, 2, 1], 1.0);
        let p = Conv3dParams::new(Tensor::filled(&[2, 2, 2, 1, 1], 1.0), Tensor::zeros(&[1]))
            .unwrap();
        let (y, _) = conv3d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[8.0]);
    }

    #[test]
    fn output_shape_matches_valid_padding() {
        // 128x128x64x1 with a 3x3x3x1x64 kernel shrinks to 126x126x62x64.
        let shape = conv3d_output_shape(&[128, 128, 64, 1], &[3, 3, 3, 1, 64]).unwrap();
        assert_eq!(shape, [126, 126, 62, 64]);
    }

    #[test]
    fn spatial_smaller_than_kernel_rejected() {
        let x = Tensor::zeros(&[2, 5, 5, 1]);
        let p =
            Conv3dParams::new(rng_tensor(&[3, 3, 3, 1, 2], 0), Tensor::zeros(&[2])).unwrap();
        assert!(matches!(conv3d_forward(&x, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::zeros(&[5, 5, 5, 3]);
        let p =
            Conv3dParams::new(rng_tensor(&[3, 3, 3, 2, 4], 0), Tensor::zeros(&[4])).unwrap();
        assert!(matches!(conv3d_forward(&x, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_matches_six_loop_oracle() {
        let x = rng_tensor(&[5, 5, 5, 2], 1);
        let p =
            Conv3dParams::new(rng_tensor(&[3, 3, 3, 2, 3], 2), rng_tensor(&[3], 3)).unwrap();
        let (y, _) = conv3d_forward(&x, &p).unwrap();
        let want = conv_oracle(&x, &p);
        assert_eq!(y, want);
    }

    #[test]
    fn forward_matches_oracle_many_random_shapes() {
        for seed in 0..24 {
            let s = seed as usize;
            let d = [3 + s % 4, 3 + (s / 2) % 4, 3 + (s / 3) % 4];
            let k = [1 + s % 3, 1 + (s / 2) % 3, 1 + (s / 5) % 3];
            let cin = 1 + s % 3;
            let cout = 1 + (s / 2) % 4;
            let x = rng_tensor(&[d[0], d[1], d[2], cin], seed);
            let p = Conv3dParams::new(
                rng_tensor(&[k[0], k[1], k[2], cin, cout], seed + 100),
                rng_tensor(&[cout], seed + 200),
            )
            .unwrap();
            let (y, _) = conv3d_forward(&x, &p).unwrap();
            assert_eq!(y, conv_oracle(&x, &p), "seed {seed}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = rng_tensor(&[4, 4, 4, 2], 5);
        let p =
            Conv3dParams::new(rng_tensor(&[2, 2, 2, 2, 3], 6), rng_tensor(&[3], 7)).unwrap();
        let (y, cache) = conv3d_forward(&x, &p).unwrap();
        let up = Tensor::zeros(y.shape());
        let (gx, grads) = conv3d_backward(&p, &cache, &up).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(grads.kernel.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_wrong_upstream_shape() {
        let x = rng_tensor(&[4, 4, 4, 1], 8);
        let p =
            Conv3dParams::new(rng_tensor(&[2, 2, 2, 1, 2], 9), Tensor::zeros(&[2])).unwrap();
        let (_, cache) = conv3d_forward(&x, &p).unwrap();
        let bad = Tensor::zeros(&[3, 3, 3, 1]);
        assert!(conv3d_backward(&p, &cache, &bad).is_err());
    }
}
