//! End-to-end forward and backward passes.
//!
//! The extractor runs per volume with shared weights; batch normalization
//! in training mode pools its statistics across every real volume of the
//! batch. Features are then re-assembled into right-padded sequences for
//! the recurrent stack, and the head turns the final hidden state into
//! class logits.
//!
//! `forward_batch` records every intermediate needed by `backward_batch`;
//! `Model::forward` is the cache-free single-sequence entry point used for
//! prediction.

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, conv3d_backward, conv3d_forward, dense_backward,
    dense_forward, dropout_backward, dropout_forward, global_maxpool3d_backward,
    global_maxpool3d_forward, maxpool3d_backward, maxpool3d_forward, softmax, validate_rate,
    BatchNormCache, BatchNormGrads, Conv3dCache, Conv3dGrads, DenseCache, DenseGrads,
    DropoutCache, Mode, Pool3dCache, Pool3dConfig,
};
use crate::model::build::{ConvBlock, Model};
use crate::recurrent::{
    bidirectional, bidirectional_backward, bptt_backward, run_sequence, BidirectionalCache,
    CellGrads, Direction, ReturnMode, RunCache, SequenceBatch,
};
use crate::tensor::Tensor;
use rand_chacha::ChaCha12Rng;

const POOL: Pool3dConfig = Pool3dConfig { window: [2, 2, 2] };

/// Saved intermediates of one extractor block for the whole volume stack.
#[derive(Debug)]
struct BlockCache {
    conv: Vec<Conv3dCache>,
    /// Post-relu conv output, stacked `[V, ...]`; doubles as the relu mask.
    relu_out: Tensor,
    pool: Vec<Pool3dCache>,
    norm: BatchNormCache,
}

#[derive(Debug)]
enum RecurrentCache {
    Uni(RunCache),
    Bi(BidirectionalCache),
}

#[derive(Debug)]
struct HeadStageCache {
    dense: DenseCache,
    dropout_after: Option<DropoutCache>,
}

/// Everything `backward_batch` needs, produced by `forward_batch`.
#[derive(Debug)]
pub struct ModelCache {
    mode: Mode,
    lengths: Vec<usize>,
    blocks: Vec<BlockCache>,
    global_pool: Vec<Pool3dCache>,
    recurrent: Vec<RecurrentCache>,
    head: Vec<HeadStageCache>,
}

impl ModelCache {
    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }
}

/// Gradients for every trainable tensor, mirroring the model's structure.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub blocks: Vec<(Conv3dGrads, BatchNormGrads)>,
    pub recurrent: Vec<(CellGrads, Option<CellGrads>)>,
    pub head: Vec<DenseGrads>,
}

impl ModelGrads {
    /// Flat name/tensor view in the exact order of
    /// `Model::trainable_parameters_mut`.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (conv, norm)) in self.blocks.iter().enumerate() {
            out.push((format!("extractor.{i}.conv.kernel"), &conv.kernel));
            out.push((format!("extractor.{i}.conv.bias"), &conv.bias));
            out.push((format!("extractor.{i}.norm.gamma"), &norm.gamma));
            out.push((format!("extractor.{i}.norm.beta"), &norm.beta));
        }
        for (i, (fwd, bwd)) in self.recurrent.iter().enumerate() {
            for (dir, grads) in std::iter::once(("fwd", fwd)).chain(bwd.iter().map(|g| ("bwd", g)))
            {
                match grads {
                    CellGrads::Lstm(g) => {
                        out.push((format!("recurrent.{i}.{dir}.wx"), &g.wx));
                        out.push((format!("recurrent.{i}.{dir}.wh"), &g.wh));
                        out.push((format!("recurrent.{i}.{dir}.bias"), &g.bias));
                    }
                    CellGrads::Gru(g) => {
                        out.push((format!("recurrent.{i}.{dir}.wx"), &g.wx));
                        out.push((format!("recurrent.{i}.{dir}.wh"), &g.wh));
                        out.push((format!("recurrent.{i}.{dir}.bias_x"), &g.bias_x));
                        out.push((format!("recurrent.{i}.{dir}.bias_h"), &g.bias_h));
                    }
                }
            }
        }
        for (i, d) in self.head.iter().enumerate() {
            out.push((format!("head.{i}.weight"), &d.weight));
            out.push((format!("head.{i}.bias"), &d.bias));
        }
        out
    }
}

fn check_volume_shape(model: &Model, v: &Tensor, sample: usize, visit: usize) -> Result<()> {
    if v.shape() != model.profile.input_shape {
        return Err(Error::Shape(format!(
            "expected volume shape {:?}, got {:?} (sample {sample}, visit {visit})",
            model.profile.input_shape,
            v.shape()
        )));
    }
    Ok(())
}

/// One extractor block over a stack of volumes `[V, D1, D2, D3, C]`.
/// Convolution and pooling act per volume; batch normalization pools its
/// statistics over the whole stack.
fn block_forward(block: &ConvBlock, x: &Tensor, mode: Mode) -> Result<(Tensor, BlockCache)> {
    let volumes = x.unstack();
    let mut conv_caches = Vec::with_capacity(volumes.len());
    let mut conv_outs = Vec::with_capacity(volumes.len());
    for v in &volumes {
        let (y, cache) = conv3d_forward(v, &block.conv)?;
        conv_caches.push(cache);
        conv_outs.push(y);
    }
    let relu_out = Tensor::stack(&conv_outs)?.map(|v| v.max(0.0));

    let mut pool_caches = Vec::with_capacity(volumes.len());
    let mut pooled = Vec::with_capacity(volumes.len());
    for v in relu_out.unstack() {
        let (y, cache) = maxpool3d_forward(&v, &POOL)?;
        pool_caches.push(cache);
        pooled.push(y);
    }
    let stacked = Tensor::stack(&pooled)?;
    let (out, norm_cache) = batchnorm_forward(&stacked, &block.norm, mode)?;

    Ok((out, BlockCache { conv: conv_caches, relu_out, pool: pool_caches, norm: norm_cache }))
}

fn block_backward(
    block: &ConvBlock,
    cache: &BlockCache,
    upstream: &Tensor,
) -> Result<(Tensor, Conv3dGrads, BatchNormGrads)> {
    let (d_pooled, norm_grads) = batchnorm_backward(&cache.norm, &block.norm, upstream)?;

    let d_pooled_vols = d_pooled.unstack();
    let mut d_relu = Vec::with_capacity(d_pooled_vols.len());
    for (pc, up) in cache.pool.iter().zip(&d_pooled_vols) {
        d_relu.push(maxpool3d_backward(pc, up)?);
    }
    let mut d_conv_out = Tensor::stack(&d_relu)?;
    for (g, &y) in d_conv_out.data_mut().iter_mut().zip(cache.relu_out.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }

    let mut conv_grads: Option<Conv3dGrads> = None;
    let mut d_inputs = Vec::with_capacity(cache.conv.len());
    for (cc, up) in cache.conv.iter().zip(d_conv_out.unstack()) {
        let (dx, g) = conv3d_backward(&block.conv, cc, &up)?;
        d_inputs.push(dx);
        conv_grads = Some(match conv_grads.take() {
            None => g,
            Some(mut acc) => {
                for (a, &b) in acc.kernel.data_mut().iter_mut().zip(g.kernel.data()) {
                    *a += b;
                }
                for (a, &b) in acc.bias.data_mut().iter_mut().zip(g.bias.data()) {
                    *a += b;
                }
                acc
            }
        });
    }

    Ok((
        Tensor::stack(&d_inputs)?,
        conv_grads.expect("at least one volume"),
        norm_grads,
    ))
}

fn recurrent_layer_forward(
    layer: &crate::model::build::RecurrentLayer,
    seq: &SequenceBatch,
) -> Result<(Tensor, RecurrentCache)> {
    match &layer.backward {
        None => {
            let (out, cache) =
                run_sequence(seq, &layer.forward, Direction::Forward, layer.return_mode)?;
            Ok((out, RecurrentCache::Uni(cache)))
        }
        Some(bwd) => {
            let (out, cache) = bidirectional(seq, &layer.forward, bwd, layer.return_mode)?;
            Ok((out, RecurrentCache::Bi(cache)))
        }
    }
}

/// Forward over a batch of sequences. Returns class logits `[B, K]`; apply
/// `softmax` (or the fused cross-entropy) downstream.
///
/// Training mode uses batch statistics for normalization and, when an RNG
/// is supplied, stochastic dropout in the head. The updated running
/// statistics live in the cache until `commit_running_stats` applies them.
pub fn forward_batch(
    model: &Model,
    sequences: &[Vec<Tensor>],
    mode: Mode,
    mut dropout_rng: Option<&mut ChaCha12Rng>,
) -> Result<(Tensor, ModelCache)> {
    validate_rate(model.dropout_rate)?;
    if sequences.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let lengths: Vec<usize> = sequences.iter().map(|s| s.len()).collect();
    if let Some(sample) = lengths.iter().position(|&l| l == 0) {
        return Err(Error::Input(format!("sample {sample} has no volumes")));
    }
    for (b, seq) in sequences.iter().enumerate() {
        for (t, v) in seq.iter().enumerate() {
            check_volume_shape(model, v, b, t)?;
        }
    }

    // Extractor over the flat stack of real volumes.
    let flat: Vec<Tensor> = sequences.iter().flatten().cloned().collect();
    let mut x = Tensor::stack(&flat)?;
    let mut blocks = Vec::with_capacity(model.extractor.len());
    for block in &model.extractor {
        let (y, cache) = block_forward(block, &x, mode)?;
        blocks.push(cache);
        x = y;
    }
    let mut global_pool = Vec::new();
    let mut feature_rows = Vec::new();
    for v in x.unstack() {
        let (f, cache) = global_maxpool3d_forward(&v)?;
        global_pool.push(cache);
        feature_rows.push(f);
    }

    // Scatter features into right-padded sequences.
    let (b, f) = (lengths.len(), model.profile.feature_width());
    let t_max = *lengths.iter().max().expect("non-empty");
    let mut padded = Tensor::zeros(&[b, t_max, f]);
    let mut flat_idx = 0;
    for (sample, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            let dst = (sample * t_max + t) * f;
            padded.data_mut()[dst..dst + f].copy_from_slice(feature_rows[flat_idx].data());
            flat_idx += 1;
        }
    }

    // Recurrent stack.
    let mut seq = SequenceBatch::new(padded, lengths.clone())?;
    let mut recurrent = Vec::with_capacity(model.recurrent.len());
    let mut hidden = None;
    for (li, layer) in model.recurrent.iter().enumerate() {
        let (out, cache) = recurrent_layer_forward(layer, &seq)?;
        recurrent.push(cache);
        if layer.return_mode == ReturnMode::All {
            seq = SequenceBatch::new(out, lengths.clone())?;
        } else {
            debug_assert_eq!(li + 1, model.recurrent.len());
            hidden = Some(out);
        }
    }
    let hidden = hidden.expect("last recurrent layer returns the final state");

    // Head with dropout after every hidden layer except the last.
    let n_hidden = model.head.len() - 1;
    let dropout_mode = if mode == Mode::Train && dropout_rng.is_some() {
        Mode::Train
    } else {
        Mode::Infer
    };
    let mut head_caches = Vec::with_capacity(model.head.len());
    let mut h = hidden;
    for (i, dense) in model.head.iter().enumerate() {
        let (y, dense_cache) = dense_forward(&h, dense)?;
        let (next, dropout_after) = if i + 1 < n_hidden {
            let mut fallback = ChaCha12Rng::seed_from_u64(0);
            let rng: &mut ChaCha12Rng = match dropout_rng.as_deref_mut() {
                Some(r) => r,
                None => &mut fallback,
            };
            let (z, mask) = dropout_forward(&y, model.dropout_rate, dropout_mode, rng)?;
            (z, Some(mask))
        } else {
            (y, None)
        };
        head_caches.push(HeadStageCache { dense: dense_cache, dropout_after });
        h = next;
    }

    Ok((
        h,
        ModelCache { mode, lengths, blocks, global_pool, recurrent, head: head_caches },
    ))
}

/// Backward over a batch, consuming the cache of the matching training-mode
/// `forward_batch`. `grad_logits` is the loss gradient with respect to the
/// returned logits.
pub fn backward_batch(
    model: &Model,
    cache: &ModelCache,
    grad_logits: &Tensor,
) -> Result<ModelGrads> {
    if cache.mode != Mode::Train {
        return Err(Error::Input(
            "backward requires a cache recorded in training mode".into(),
        ));
    }

    // Head, in reverse.
    let mut head_grads: Vec<DenseGrads> = Vec::with_capacity(model.head.len());
    let mut up = grad_logits.clone();
    for (dense, stage) in model.head.iter().zip(&cache.head).rev() {
        if let Some(mask) = &stage.dropout_after {
            up = dropout_backward(mask, &up)?;
        }
        let (dx, grads) = dense_backward(&stage.dense, dense, &up)?;
        head_grads.push(grads);
        up = dx;
    }
    head_grads.reverse();

    // Recurrent stack, in reverse.
    let mut rec_grads: Vec<(CellGrads, Option<CellGrads>)> =
        Vec::with_capacity(model.recurrent.len());
    for (layer, rcache) in model.recurrent.iter().zip(&cache.recurrent).rev() {
        let (grads, dx) = match (rcache, &layer.backward) {
            (RecurrentCache::Uni(rc), None) => {
                let (g, dx) = bptt_backward(rc, &layer.forward, &up)?;
                ((g, None), dx)
            }
            (RecurrentCache::Bi(bc), Some(bwd_cell)) => {
                let (gf, gb, dx) = bidirectional_backward(bc, &layer.forward, bwd_cell, &up)?;
                ((gf, Some(gb)), dx)
            }
            _ => return Err(Error::Input("cache does not match model layout".into())),
        };
        rec_grads.push(grads);
        up = dx;
    }
    rec_grads.reverse();

    // Gather per-volume feature gradients from the padded [B, T, F] layout.
    let f = model.profile.feature_width();
    let t_max = up.shape()[1];
    let mut d_volumes = Vec::new();
    for (sample, &len) in cache.lengths.iter().enumerate() {
        for t in 0..len {
            let src = (sample * t_max + t) * f;
            let row = Tensor::from_vec(&[f], up.data()[src..src + f].to_vec())?;
            d_volumes.push(row);
        }
    }

    let mut d_stack = {
        let mut parts = Vec::with_capacity(d_volumes.len());
        for (gp, row) in cache.global_pool.iter().zip(&d_volumes) {
            parts.push(global_maxpool3d_backward(gp, row)?);
        }
        Tensor::stack(&parts)?
    };

    let mut block_grads: Vec<(Conv3dGrads, BatchNormGrads)> = Vec::new();
    for (block, bcache) in model.extractor.iter().zip(&cache.blocks).rev() {
        let (dx, conv_g, norm_g) = block_backward(block, bcache, &d_stack)?;
        block_grads.push((conv_g, norm_g));
        d_stack = dx;
    }
    block_grads.reverse();

    Ok(ModelGrads { blocks: block_grads, recurrent: rec_grads, head: head_grads })
}

impl Model {
    /// Copies the batch-normalization running statistics produced by a
    /// training-mode forward into the model.
    pub fn commit_running_stats(&mut self, cache: &ModelCache) {
        for (block, bc) in self.extractor.iter_mut().zip(&cache.blocks) {
            block.norm.running_mean = bc.norm.next_running_mean.clone();
            block.norm.running_var = bc.norm.next_running_var.clone();
        }
    }

    /// Feature vector of one volume using inference-mode normalization.
    pub fn extract_features(&self, volume: &Tensor) -> Result<Tensor> {
        check_volume_shape(self, volume, 0, 0)?;
        let mut x = volume.reshape(&{
            let mut s = vec![1];
            s.extend_from_slice(volume.shape());
            s
        })?;
        for block in &self.extractor {
            let (y, _) = block_forward(block, &x, Mode::Infer)?;
            x = y;
        }
        let volume = x.unstack().pop().expect("stack of one");
        let (f, _) = global_maxpool3d_forward(&volume)?;
        Ok(f)
    }

    /// Classifies one visit sequence, returning the class probability
    /// vector `[K]`.
    ///
    /// Inference mode streams volumes through the extractor one at a time
    /// and is fully deterministic. Training mode normalizes with the
    /// sequence's own batch statistics; stochastic dropout only applies in
    /// the training loop, which supplies an RNG to `forward_batch`.
    pub fn forward(&self, volumes: &[Tensor], mode: Mode) -> Result<Tensor> {
        if volumes.is_empty() {
            return Err(Error::Input("sequence has no volumes".into()));
        }
        let logits = match mode {
            Mode::Infer => {
                let seq =
                    crate::recurrent::time_distributed(|v| self.extract_features(v), volumes)?;
                let mut out = None;
                let mut current = seq;
                for layer in &self.recurrent {
                    let (y, _) = recurrent_layer_forward(layer, &current)?;
                    if layer.return_mode == ReturnMode::All {
                        current = SequenceBatch::new(y, vec![volumes.len()])?;
                    } else {
                        out = Some(y);
                    }
                }
                let mut h = out.expect("last recurrent layer returns the final state");
                for dense in &self.head {
                    let (y, _) = dense_forward(&h, dense)?;
                    h = y;
                }
                h
            }
            Mode::Train => {
                let (logits, _) = forward_batch(self, &[volumes.to_vec()], Mode::Train, None)?;
                logits
            }
        };
        let probs = softmax(&logits)?;
        probs.reshape(&[probs.numel()])
    }

    /// Deterministic classification: `forward` in inference mode.
    pub fn predict(&self, volumes: &[Tensor]) -> Result<Tensor> {
        self.forward(volumes, Mode::Infer)
    }
}

use rand::SeedableRng;
