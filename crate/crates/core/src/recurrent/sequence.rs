//! Running a recurrent cell over batches of right-padded visit sequences,
//! in either time direction, plus backpropagation through time.

use crate::error::{Error, Result};
use crate::recurrent::gru::{gru_step, gru_step_backward, GruGrads, GruParams, GruStepCache};
use crate::recurrent::lstm::{
    lstm_step, lstm_step_backward, LstmGrads, LstmParams, LstmState, LstmStepCache,
};
use crate::tensor::Tensor;

/// A batch of feature sequences `[B, T, F]`, right-padded to a common `T`.
/// Timestep `t` of sample `b` is real iff `t < lengths[b]`.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    features: Tensor,
    lengths: Vec<usize>,
}

impl SequenceBatch {
    pub fn new(features: Tensor, lengths: Vec<usize>) -> Result<Self> {
        if features.rank() != 3 {
            return Err(Error::Shape(format!(
                "sequence batch must be [B,T,F], got {:?}",
                features.shape()
            )));
        }
        let (b, t) = (features.shape()[0], features.shape()[1]);
        if lengths.len() != b {
            return Err(Error::Shape(format!(
                "{} lengths for a batch of {b}",
                lengths.len()
            )));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l > t) {
            return Err(Error::Shape(format!(
                "sample length {bad} exceeds padded width {t}"
            )));
        }
        Ok(SequenceBatch { features, lengths })
    }

    pub fn batch_size(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn time_steps(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn feature_width(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// True for real (unpadded) timesteps.
    pub fn is_real(&self, sample: usize, t: usize) -> bool {
        t < self.lengths[sample]
    }

    fn step_row(&self, sample: usize, t: usize) -> Tensor {
        let f = self.feature_width();
        let start = (sample * self.time_steps() + t) * f;
        Tensor::from_vec(&[f], self.features.data()[start..start + f].to_vec())
            .expect("row slice is exactly [F]")
    }
}

/// A recurrent cell of either flavor, sharing the runner machinery.
#[derive(Debug, Clone)]
pub enum Cell {
    Lstm(LstmParams),
    Gru(GruParams),
}

impl Cell {
    pub fn input_size(&self) -> usize {
        match self {
            Cell::Lstm(p) => p.input_size(),
            Cell::Gru(p) => p.input_size(),
        }
    }

    pub fn hidden_size(&self) -> usize {
        match self {
            Cell::Lstm(p) => p.hidden_size(),
            Cell::Gru(p) => p.hidden_size(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Cell::Lstm(p) => p.param_count(),
            Cell::Gru(p) => p.param_count(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum CellGrads {
    Lstm(LstmGrads),
    Gru(GruGrads),
}

impl CellGrads {
    pub fn zeros_like(cell: &Cell) -> Self {
        match cell {
            Cell::Lstm(p) => CellGrads::Lstm(LstmGrads::zeros_like(p)),
            Cell::Gru(p) => CellGrads::Gru(GruGrads::zeros_like(p)),
        }
    }
}

#[derive(Debug, Clone)]
enum StepCache {
    Lstm(LstmStepCache),
    Gru(GruStepCache),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReturnMode {
    /// State after each sample's final real step: `[B, H]`.
    Last,
    /// State after every real step, aligned to input timesteps, padded rows
    /// zero: `[B, T, H]`.
    All,
}

/// Per-sample step caches in iteration order, plus enough metadata to replay
/// the run in reverse.
#[derive(Debug, Clone)]
pub struct RunCache {
    direction: Direction,
    return_mode: ReturnMode,
    lengths: Vec<usize>,
    time_steps: usize,
    feature_width: usize,
    steps: Vec<Vec<StepCache>>,
}

/// Time indices in the order the runner visits them for one sample.
fn iteration_order(direction: Direction, len: usize) -> Vec<usize> {
    match direction {
        Direction::Forward => (0..len).collect(),
        Direction::Backward => (0..len).rev().collect(),
    }
}

pub fn run_sequence(
    seq: &SequenceBatch,
    cell: &Cell,
    direction: Direction,
    return_mode: ReturnMode,
) -> Result<(Tensor, RunCache)> {
    if seq.feature_width() != cell.input_size() {
        return Err(Error::Shape(format!(
            "cell expects input width {}, sequence has {}",
            cell.input_size(),
            seq.feature_width()
        )));
    }
    if let Some(sample) = seq.lengths.iter().position(|&l| l == 0) {
        return Err(Error::Input(format!(
            "sample {sample} has no real timesteps"
        )));
    }

    let (b, t, h) = (seq.batch_size(), seq.time_steps(), cell.hidden_size());
    let mut output = match return_mode {
        ReturnMode::Last => Tensor::zeros(&[b, h]),
        ReturnMode::All => Tensor::zeros(&[b, t, h]),
    };
    let mut steps = Vec::with_capacity(b);

    for sample in 0..b {
        let len = seq.lengths[sample];
        let mut caches = Vec::with_capacity(len);
        let mut lstm_state = LstmState::zeros(h);
        let mut gru_state = Tensor::zeros(&[h]);

        for &time in &iteration_order(direction, len) {
            let x = seq.step_row(sample, time);
            let hidden = match cell {
                Cell::Lstm(p) => {
                    let (next, cache) = lstm_step(&x, &lstm_state, p)?;
                    caches.push(StepCache::Lstm(cache));
                    lstm_state = next;
                    &lstm_state.h
                }
                Cell::Gru(p) => {
                    let (next, cache) = gru_step(&x, &gru_state, p)?;
                    caches.push(StepCache::Gru(cache));
                    gru_state = next;
                    &gru_state
                }
            };
            if return_mode == ReturnMode::All {
                let dst = (sample * t + time) * h;
                output.data_mut()[dst..dst + h].copy_from_slice(hidden.data());
            }
        }

        if return_mode == ReturnMode::Last {
            let hidden = match cell {
                Cell::Lstm(_) => &lstm_state.h,
                Cell::Gru(_) => &gru_state,
            };
            output.data_mut()[sample * h..(sample + 1) * h].copy_from_slice(hidden.data());
        }
        steps.push(caches);
    }

    Ok((
        output,
        RunCache {
            direction,
            return_mode,
            lengths: seq.lengths.clone(),
            time_steps: t,
            feature_width: seq.feature_width(),
            steps,
        },
    ))
}

/// Exact gradients through a `run_sequence` call. Parameter gradients sum
/// over all real timesteps of all samples; feature gradients come back as
/// `[B, T, F]` with zero rows at padded steps.
pub fn bptt_backward(
    cache: &RunCache,
    cell: &Cell,
    upstream: &Tensor,
) -> Result<(CellGrads, Tensor)> {
    let (b, t, f) = (cache.lengths.len(), cache.time_steps, cache.feature_width);
    let h = cell.hidden_size();
    let expected: &[usize] = match cache.return_mode {
        ReturnMode::Last => &[b, h],
        ReturnMode::All => &[b, t, h],
    };
    if upstream.shape() != expected {
        return Err(Error::Shape(format!(
            "upstream shape {:?} does not match run output {:?}",
            upstream.shape(),
            expected
        )));
    }

    let mut grads = CellGrads::zeros_like(cell);
    let mut d_features = Tensor::zeros(&[b, t, f]);

    for sample in 0..b {
        let len = cache.lengths[sample];
        let order = iteration_order(cache.direction, len);

        let mut dh = match cache.return_mode {
            ReturnMode::Last => Tensor::from_vec(
                &[h],
                upstream.data()[sample * h..(sample + 1) * h].to_vec(),
            )?,
            ReturnMode::All => Tensor::zeros(&[h]),
        };
        let mut dc = Tensor::zeros(&[h]);

        for iter in (0..len).rev() {
            let time = order[iter];
            if cache.return_mode == ReturnMode::All {
                let src = (sample * t + time) * h;
                for (acc, &u) in dh.data_mut().iter_mut().zip(&upstream.data()[src..src + h]) {
                    *acc += u;
                }
            }

            let dx = match (&cache.steps[sample][iter], &mut grads, cell) {
                (StepCache::Lstm(sc), CellGrads::Lstm(g), Cell::Lstm(p)) => {
                    let (dx, dh_prev, dc_prev) = lstm_step_backward(sc, p, &dh, &dc, g)?;
                    dh = dh_prev;
                    dc = dc_prev;
                    dx
                }
                (StepCache::Gru(sc), CellGrads::Gru(g), Cell::Gru(p)) => {
                    let (dx, dh_prev) = gru_step_backward(sc, p, &dh, g)?;
                    dh = dh_prev;
                    dx
                }
                _ => {
                    return Err(Error::Shape(
                        "run cache was produced by a different cell flavor".into(),
                    ))
                }
            };
            let dst = (sample * t + time) * f;
            d_features.data_mut()[dst..dst + f].copy_from_slice(dx.data());
        }
    }

    Ok((grads, d_features))
}

#[derive(Debug, Clone)]
pub struct BidirectionalCache {
    pub forward: RunCache,
    pub backward: RunCache,
}

/// Runs one cell forward in time and another backward, concatenating their
/// outputs along the feature axis (width `2H`).
pub fn bidirectional(
    seq: &SequenceBatch,
    cell_fwd: &Cell,
    cell_bwd: &Cell,
    return_mode: ReturnMode,
) -> Result<(Tensor, BidirectionalCache)> {
    if cell_fwd.input_size() != cell_bwd.input_size()
        || cell_fwd.hidden_size() != cell_bwd.hidden_size()
    {
        return Err(Error::Shape(format!(
            "direction cells disagree: forward {}x{}, backward {}x{}",
            cell_fwd.input_size(),
            cell_fwd.hidden_size(),
            cell_bwd.input_size(),
            cell_bwd.hidden_size()
        )));
    }
    let (out_f, run_f) = run_sequence(seq, cell_fwd, Direction::Forward, return_mode)?;
    let (out_b, run_b) = run_sequence(seq, cell_bwd, Direction::Backward, return_mode)?;
    Ok((
        concat_last(&out_f, &out_b)?,
        BidirectionalCache { forward: run_f, backward: run_b },
    ))
}

/// Gradients for both direction cells plus the summed feature gradient.
pub fn bidirectional_backward(
    cache: &BidirectionalCache,
    cell_fwd: &Cell,
    cell_bwd: &Cell,
    upstream: &Tensor,
) -> Result<(CellGrads, CellGrads, Tensor)> {
    let (up_f, up_b) = split_last(upstream)?;
    let (grads_f, dx_f) = bptt_backward(&cache.forward, cell_fwd, &up_f)?;
    let (grads_b, dx_b) = bptt_backward(&cache.backward, cell_bwd, &up_b)?;
    let mut dx = dx_f;
    for (a, &b) in dx.data_mut().iter_mut().zip(dx_b.data()) {
        *a += b;
    }
    Ok((grads_f, grads_b, dx))
}

/// Applies a per-volume feature extractor to each timestep with shared
/// weights, producing a single-sample sequence batch `[1, T, F]`.
pub fn time_distributed<F>(extractor: F, volumes: &[Tensor]) -> Result<SequenceBatch>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if volumes.is_empty() {
        return Err(Error::Input("no volumes to extract features from".into()));
    }
    if let Some(v) = volumes.iter().find(|v| v.shape() != volumes[0].shape()) {
        return Err(Error::Shape(format!(
            "volumes must share a shape: {:?} vs {:?}",
            volumes[0].shape(),
            v.shape()
        )));
    }
    let mut rows = Vec::with_capacity(volumes.len());
    for v in volumes {
        let features = extractor(v)?;
        if features.rank() != 1 {
            return Err(Error::Shape(format!(
                "extractor must return a feature vector, got {:?}",
                features.shape()
            )));
        }
        rows.push(features);
    }
    let t = rows.len();
    let stacked = Tensor::stack(&rows)?;
    let f = stacked.shape()[1];
    SequenceBatch::new(stacked.reshape(&[1, t, f])?, vec![t])
}

fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != b.rank() || a.shape()[..a.rank() - 1] != b.shape()[..b.rank() - 1] {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (wa, wb) = (*a.shape().last().unwrap(), *b.shape().last().unwrap());
    let rows = a.numel() / wa;
    let mut out = vec![0.0; rows * (wa + wb)];
    for r in 0..rows {
        out[r * (wa + wb)..r * (wa + wb) + wa].copy_from_slice(&a.data()[r * wa..(r + 1) * wa]);
        out[r * (wa + wb) + wa..(r + 1) * (wa + wb)]
            .copy_from_slice(&b.data()[r * wb..(r + 1) * wb]);
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = wa + wb;
    Tensor::from_vec(&shape, out)
}

/// Splits the last axis exactly in half; inverse of `concat_last` for equal
/// widths.
fn split_last(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let w = *x.shape().last().unwrap();
    if w % 2 != 0 {
        return Err(Error::Shape(format!(
            "cannot halve odd trailing width {w}"
        )));
    }
    let half = w / 2;
    let rows = x.numel() / w;
    let mut a = vec![0.0; rows * half];
    let mut b = vec![0.0; rows * half];
    for r in 0..rows {
        a[r * half..(r + 1) * half].copy_from_slice(&x.data()[r * w..r * w + half]);
        b[r * half..(r + 1) * half].copy_from_slice(&x.data()[r * w + half..(r + 1) * w]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = half;
    Ok((
        Tensor::from_vec(&shape, a)?,
        Tensor::from_vec(&shape, b)?,
    ))
}
