//! Finite-difference verification of every analytic backward pass.
//!
//! Each target builds a small randomized instance, takes a fixed random
//! linear functional of the layer output as the loss, and compares the
//! analytic gradient of that loss against central differences.

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, conv3d_backward, conv3d_forward, dense_backward,
    dense_forward, global_maxpool3d_forward, maxpool3d_backward, maxpool3d_forward,
    BatchNormState, Conv3dParams, DenseParams, Mode, Pool3dConfig,
};
use crate::model::{backward_batch, forward_batch, ArchitectureId, Model, ScaleProfile};
use crate::recurrent::{
    bptt_backward, run_sequence, Cell, CellGrads, Direction, GruParams, LstmParams, ReturnMode,
    SequenceBatch,
};
use crate::tensor::{Activation, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeSet;
use std::fmt::Write as _;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckTarget {
    Dense,
    Conv3d,
    MaxPool3d,
    GlobalMaxPool3d,
    BatchNorm,
    Lstm,
    Gru,
    EndToEnd,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 8] = [
        CheckTarget::Dense,
        CheckTarget::Conv3d,
        CheckTarget::MaxPool3d,
        CheckTarget::GlobalMaxPool3d,
        CheckTarget::BatchNorm,
        CheckTarget::Lstm,
        CheckTarget::Gru,
        CheckTarget::EndToEnd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CheckTarget::Dense => "dense",
            CheckTarget::Conv3d => "conv3d",
            CheckTarget::MaxPool3d => "maxpool3d",
            CheckTarget::GlobalMaxPool3d => "global-maxpool3d",
            CheckTarget::BatchNorm => "batchnorm",
            CheckTarget::Lstm => "lstm",
            CheckTarget::Gru => "gru",
            CheckTarget::EndToEnd => "end-to-end",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub block: String,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub target: CheckTarget,
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error() <= tolerance
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            let _ = writeln!(
                out,
                "{} {} {:.3e}",
                self.target.as_str(),
                b.block,
                b.max_relative_error
            );
        }
        out
    }
}

/// Scale-aware error: absolute below magnitude 1, relative above.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central-difference check of `analytic` as the gradient of `eval` at `x`,
/// probing every `stride`-th element. Returns the worst error seen.
pub fn fd_max_error<F>(
    x: &Tensor,
    analytic: &Tensor,
    stride: usize,
    mut eval: F,
) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if x.shape() != analytic.shape() {
        return Err(Error::Shape(format!(
            "gradient shape {:?} does not match input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::Input("probe stride must be positive".into()));
    }
    let mut worst = 0.0f64;
    let mut i = 0;
    while i < x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
        i += stride;
    }
    Ok(worst)
}

fn random_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
    Tensor::from_vec(
        shape,
        (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .expect("positive extents")
}

fn dot(w: &Tensor, y: &Tensor) -> f64 {
    w.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

fn check_dense(rng: &mut ChaCha12Rng) -> Result<Vec<BlockCheck>> {
    let x = random_tensor(rng, &[3, 4]);
    let weight = random_tensor(rng, &[4, 5]);
    let bias = random_tensor(rng, &[5]);
    let w = random_tensor(rng, &[3, 5]);
    let params = DenseParams::new(weight.clone(), bias.clone(), Activation::Linear)?;

    let (_, cache) = dense_forward(&x, &params)?;
    let (dx, grads) = dense_backward(&cache, &params, &w)?;

    let mut blocks = Vec::new();
    blocks.push(BlockCheck {
        block: "weight".into(),
        max_relative_error: fd_max_error(&weight, &grads.weight, 1, |cand| {
            let p = DenseParams::new(cand.clone(), bias.clone(), Activation::Linear)?;
            Ok(dot(&w, &dense_forward(&x, &p)?.0))
        })?,
    });
    blocks.push(BlockCheck {
        block: "bias".into(),
        max_relative_error: fd_max_error(&bias, &grads.bias, 1, |cand| {
            let p = DenseParams::new(weight.clone(), cand.clone(), Activation::Linear)?;
            Ok(dot(&w, &dense_forward(&x, &p)?.0))
        })?,
    });
    blocks.push(BlockCheck {
        block: "input".into(),
        max_relative_error: fd_max_error(&x, &dx, 1, |cand| {
            Ok(dot(&w, &dense_forward(cand, &params)?.0))
        })?,
    });
    Ok(blocks)
}

fn check_conv3d(rng: &mut ChaCha12Rng) -> Result<Vec<BlockCheck>> {
    let x = random_tensor(rng, &[5, 5, 4, 2]);
    let kernel = random_tensor(rng, &[2, 2, 2, 2, 3]);
    let bias = random_tensor(rng, &[3]);
    let params = Conv3dParams::new(kernel.clone(), bias.clone())?;
    let (y, cache) = conv3d_forward(&x, &params)?;
    let w = random_tensor(rng, y.shape());
    let (dx, grads) = conv3d_backward(&params, &cache, &w)?;

    let mut blocks = Vec::new();
    blocks.push(BlockCheck {
        block: "kernel".into(),
        max_relative_error: fd_max_error(&kernel, &grads.kernel, 1, |cand| {
            let p = Conv3dParams::new(cand.clone(), bias.clone())?;
            Ok(dot(&w, &conv3d_forward(&x, &p)?.0))
        })?,
    });
    blocks.push(BlockCheck {
        block: "bias".into(),
        max_relative_error: fd_max_error(&bias, &grads.bias, 1, |cand| {
            let p = Conv3dParams::new(kernel.clone(), cand.clone())?;
            Ok(dot(&w, &conv3d_forward(&x, &p)?.0))
        })?,
    });
    blocks.push(BlockCheck {
        block: "input".into(),
        max_relative_error: fd_max_error(&x, &dx, 3, |cand| {
            Ok(dot(&w, &conv3d_forward(cand, &params)?.0))
        })?,
    });
    Ok(blocks)
}

fn check_maxpool(rng: &mut ChaCha12Rng) -> Result<Vec<BlockCheck>> {
    let x = random_tensor(rng, &[6, 6, 4, 3]);
    let cfg = Pool3dConfig { window: [2, 2, 2] };
    let (y, cache) = maxpool3d_forward(&x, &cfg)?;
    let w = random_tensor(rng, y.shape());
    let dx = maxpool3d_backward(&cache, &w)?;
    Ok(vec![BlockCheck {
        block: "input".into(),
        max_relative_error: fd_max_error(&x, &dx, 2, |cand| {
            Ok(dot(&w, &maxpool3d_forward(cand, &cfg)?.0))
        })?,
    }])
}

fn check_global_maxpool(rng: &mut ChaCha12Rng) -> Result<Vec<BlockCheck>> {
    let x = random_tensor(rng, &[4, 4, 3, 5]);
    let (y, cache) = global_maxpool3d_forward(&x)?;
    let w = random_tensor(rng, y.shape());
    let dx = crate::layers::global_maxpool3d_backward(&cache, &w)?;
    Ok(vec![BlockCheck {
        block: "input".into(),
        max_relative_error: fd_max_error(&x, &dx, 2, |cand| {
            Ok(dot(&w, &global_maxpool3d_forward(cand)?.0))
        })?,
    }])
}

fn check_batchnorm(rng: &mut ChaCha12Rng) -> Result<Vec<BlockCheck>> {
    let x = random_tensor(rng, &[6, 5]);
    let mut state = BatchNormState::new(5);
    for v in state.gamma.data_mut() {
        *v = 1.0 + rng.gen_range(-0.3..0.3);
    }
    for v in state.beta.data_mut() {
        *v = rng.gen_range(-0.3..0.3);
    }
    let (y, cache) = batchnorm_forward(&x, &state, Mode::Train)?;
    let w = random_tensor(rng, y.shape());
    let (dx, grads) = batchnorm_backward(&cache, &state, &w)?;

    let with_gamma = |gamma: &Tensor| -> BatchNormState {
        let mut s = state.clone();
        s.gamma = gamma.clone();
        s
    };
    let with_beta = |beta: &Tensor| -> BatchNormState {
        let mut s = state.clone();
        s.beta = beta.clone();
        s
    };
    let mut blocks = Vec::new();
    blocks.push(BlockCheck {
        block: "gamma".into(),
        max_relative_error: fd_max_error(&state.gamma, &grads.gamma, 1, |cand| {
            Ok(dot(&w, &batchnorm_forward(&x, &with_gamma(cand), Mode::Train)?.0))
        })?,
    });
    blocks.push(BlockCheck {
        block: "beta".into(),
        max_relative_error: fd_max_error(&state.beta, &grads.beta, 1, |cand| {
            Ok(dot(&w, &batchnorm_forward(&x, &with_beta(cand), Mode::Train)?.0))
        })?,
    });
    blocks.push(BlockCheck {
        block: "input".into(),
        max_relative_error: fd_max_error(&x, &dx, 1, |cand| {
            Ok(dot(&w, &batchnorm_forward(cand, &state, Mode::Train)?.0))
        })?,
    });
    Ok(blocks)
}

fn fill_random(t: &mut Tensor, rng: &mut ChaCha12Rng) {
    for v in t.data_mut() {
        *v = rng.gen_range(-0.6..0.6);
    }
}

fn check_recurrent(rng: &mut ChaCha12Rng, gru: bool) -> Result<Vec<BlockCheck>> {
    let (input, hidden, b, t) = (4usize, 3usize, 2usize, 3usize);
    let features = random_tensor(rng, &[b, t, input]);
    let lengths = vec![3usize, 2];
    let seq = SequenceBatch::new(features.clone(), lengths.clone())?;

    let cell = if gru {
        let mut p = GruParams::zeros(input, hidden);
        fill_random(&mut p.wx, rng);
        fill_random(&mut p.wh, rng);
        fill_random(&mut p.bias_x, rng);
        fill_random(&mut p.bias_h, rng);
        Cell::Gru(p)
    } else {
        let mut p = LstmParams::zeros(input, hidden);
        fill_random(&mut p.wx, rng);
        fill_random(&mut p.wh, rng);
        fill_random(&mut p.bias, rng);
        Cell::Lstm(p)
    };

    let (y, cache) = run_sequence(&seq, &cell, Direction::Forward, ReturnMode::All)?;
    let w = random_tensor(rng, y.shape());
    let (grads, dx) = bptt_backward(&cache, &cell, &w)?;

    let rerun = |cell: &Cell, feats: &Tensor| -> Result<f64> {
        let seq = SequenceBatch::new(feats.clone(), lengths.clone())?;
        Ok(dot(&w, &run_sequence(&seq, cell, Direction::Forward, ReturnMode::All)?.0))
    };

    let mut blocks = Vec::new();
    match (&cell, &grads) {
        (Cell::Lstm(p), CellGrads::Lstm(g)) => {
            for (name, param, grad) in [
                ("wx", &p.wx, &g.wx),
                ("wh", &p.wh, &g.wh),
                ("bias", &p.bias, &g.bias),
            ] {
                blocks.push(BlockCheck {
                    block: name.into(),
                    max_relative_error: fd_max_error(param, grad, 1, |cand| {
                        let mut q = p.clone();
                        match name {
                            "wx" => q.wx = cand.clone(),
                            "wh" => q.wh = cand.clone(),
                            _ => q.bias = cand.clone(),
                        }
                        rerun(&Cell::Lstm(q), &features)
                    })?,
                });
            }
        }
        (Cell::Gru(p), CellGrads::Gru(g)) => {
            for (name, param, grad) in [
                ("wx", &p.wx, &g.wx),
                ("wh", &p.wh, &g.wh),
                ("bias_x", &p.bias_x, &g.bias_x),
                ("bias_h", &p.bias_h, &g.bias_h),
            ] {
                blocks.push(BlockCheck {
                    block: name.into(),
                    max_relative_error: fd_max_error(param, grad, 1, |cand| {
                        let mut q = p.clone();
                        match name {
                            "wx" => q.wx = cand.clone(),
                            "wh" => q.wh = cand.clone(),
                            "bias_x" => q.bias_x = cand.clone(),
                            _ => q.bias_h = cand.clone(),
                        }
                        rerun(&Cell::Gru(q), &features)
                    })?,
                });
            }
        }
        _ => unreachable!("cell and gradients share a flavor"),
    }
    blocks.push(BlockCheck {
        block: "input".into(),
        max_relative_error: fd_max_error(&features, &dx, 1, |cand| rerun(&cell, cand))?,
    });
    Ok(blocks)
}

/// Samples 50 trainable parameters of a reduced-profile sequence model
/// (three visits, so backpropagation runs through three timesteps) and
/// compares the batch backward pass against central differences.
fn check_end_to_end(rng: &mut ChaCha12Rng) -> Result<Vec<BlockCheck>> {
    let profile = ScaleProfile::reduced();
    let mut model = Model::build(ArchitectureId::Lstm, &profile, rng.gen())?;
    let [d1, d2, d3, _] = profile.input_shape;
    let volumes: Vec<Tensor> = (0..3)
        .map(|_| {
            Tensor::from_vec(
                &[d1, d2, d3, 1],
                (0..d1 * d2 * d3).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
        })
        .collect::<Result<_>>()?;
    let batch = vec![volumes];

    let (logits, cache) = forward_batch(&model, &batch, Mode::Train, None)?;
    let w = random_tensor(rng, logits.shape());
    let analytic = backward_batch(&model, &cache, &w)?;
    let named = analytic.named();

    let sizes: Vec<usize> = named.iter().map(|(_, t)| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut picks: BTreeSet<usize> = BTreeSet::new();
    while picks.len() < 50 {
        picks.insert(rng.gen_range(0..total));
    }

    let mut worst_per_block: Vec<(String, f64)> =
        named.iter().map(|(n, _)| (n.clone(), 0.0)).collect();
    for flat in picks {
        let mut block = 0;
        let mut offset = flat;
        while offset >= sizes[block] {
            offset -= sizes[block];
            block += 1;
        }
        let analytic_value = named[block].1.data()[offset];

        let mut probe = |delta: f64| -> Result<f64> {
            {
                let mut params = model.trainable_parameters_mut();
                params[block].1.data_mut()[offset] += delta;
            }
            let out = forward_batch(&model, &batch, Mode::Train, None).map(|(l, _)| dot(&w, &l));
            {
                let mut params = model.trainable_parameters_mut();
                params[block].1.data_mut()[offset] -= delta;
            }
            out
        };
        let numeric = (probe(FD_STEP)? - probe(-FD_STEP)?) / (2.0 * FD_STEP);
        let err = relative_error(analytic_value, numeric);
        if err > worst_per_block[block].1 {
            worst_per_block[block].1 = err;
        }
    }
    Ok(worst_per_block
        .into_iter()
        .map(|(block, max_relative_error)| BlockCheck { block, max_relative_error })
        .collect())
}

/// Runs the finite-difference comparison for one target on a seeded random
/// instance and reports the worst error per parameter block.
pub fn gradient_check(target: CheckTarget, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let blocks = match target {
        CheckTarget::Dense => check_dense(&mut rng)?,
        CheckTarget::Conv3d => check_conv3d(&mut rng)?,
        CheckTarget::MaxPool3d => check_maxpool(&mut rng)?,
        CheckTarget::GlobalMaxPool3d => check_global_maxpool(&mut rng)?,
        CheckTarget::BatchNorm => check_batchnorm(&mut rng)?,
        CheckTarget::Lstm => check_recurrent(&mut rng, false)?,
        CheckTarget::Gru => check_recurrent(&mut rng, true)?,
        CheckTarget::EndToEnd => check_end_to_end(&mut rng)?,
    };
    Ok(GradCheckReport { target, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_and_cell_passes_the_tolerance() {
        for target in [
            CheckTarget::Dense,
            CheckTarget::Conv3d,
            CheckTarget::MaxPool3d,
            CheckTarget::GlobalMaxPool3d,
            CheckTarget::BatchNorm,
            CheckTarget::Lstm,
            CheckTarget::Gru,
        ] {
            let report = gradient_check(target, 42).unwrap();
            assert!(
                report.passes(FD_TOLERANCE),
                "{}:\n{}",
                target.as_str(),
                report.text()
            );
        }
    }

    #[test]
    fn linear_dense_gradients_are_nearly_exact() {
        let report = gradient_check(CheckTarget::Dense, 7).unwrap();
        assert!(report.max_error() <= 1e-10, "{}", report.text());
    }

    #[test]
    fn end_to_end_sampled_parameters_pass_the_tolerance() {
        let report = gradient_check(CheckTarget::EndToEnd, 42).unwrap();
        assert!(report.passes(FD_TOLERANCE), "{}", report.text());
    }

    #[test]
    fn sign_flipped_gradients_are_caught() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, &[4, 4, 3, 2]);
        let kernel = random_tensor(&mut rng, &[2, 2, 2, 2, 2]);
        let bias = random_tensor(&mut rng, &[2]);
        let params = Conv3dParams::new(kernel, bias).unwrap();
        let (y, cache) = conv3d_forward(&x, &params).unwrap();
        let w = random_tensor(&mut rng, y.shape());
        let (_, grads) = conv3d_backward(&params, &cache, &w).unwrap();

        let flipped = grads.kernel.map(|g| -g);
        let err = fd_max_error(&params.kernel, &flipped, 1, |cand| {
            let p = Conv3dParams::new(cand.clone(), params.bias.clone())?;
            Ok(dot(&w, &conv3d_forward(&x, &p)?.0))
        })
        .unwrap();
        assert!(err > 0.05, "flipped gradients still within {err}");
    }

    #[test]
    fn report_text_lists_every_block() {
        let report = gradient_check(CheckTarget::Gru, 11).unwrap();
        let text = report.text();
        for block in ["wx", "wh", "bias_x", "bias_h", "input"] {
            assert!(text.contains(block), "missing {block} in:\n{text}");
        }
    }
}
