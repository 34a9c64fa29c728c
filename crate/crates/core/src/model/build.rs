//! Model construction: deterministic seeded initialization of the extractor
//! blocks, the recurrent stack, and the dense head, plus the parameter
//! registry and per-layer accounting.

use crate::error::Result;
use crate::layers::{BatchNormState, Conv3dParams, DenseParams};
use crate::model::arch::{ArchitectureId, CellFlavor, ScaleProfile, NUM_CLASSES};
use crate::recurrent::{Cell, GruParams, LstmParams, ReturnMode};
use crate::tensor::{Activation, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub const DEFAULT_DROPOUT_RATE: f64 = 0.5;

/// One extractor stage: 3x3x3 conv (relu), 2x2x2 max pool, batch norm.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv3dParams,
    pub norm: BatchNormState,
}

/// One recurrent stage; bidirectional stages carry a second cell that runs
/// in reverse time order.
#[derive(Debug, Clone)]
pub struct RecurrentLayer {
    pub forward: Cell,
    pub backward: Option<Cell>,
    pub return_mode: ReturnMode,
}

impl RecurrentLayer {
    pub fn output_width(&self) -> usize {
        self.forward.hidden_size() * if self.backward.is_some() { 2 } else { 1 }
    }

    pub fn param_count(&self) -> usize {
        self.forward.param_count()
            + self.backward.as_ref().map_or(0, |c| c.param_count())
    }
}

/// A fully materialized network: every parameter tensor of one architecture
/// at one scale, plus the metadata needed to rebuild or persist it.
#[derive(Debug, Clone)]
pub struct Model {
    pub architecture: ArchitectureId,
    pub profile: ScaleProfile,
    pub seed: u64,
    pub dropout_rate: f64,
    pub extractor: Vec<ConvBlock>,
    pub recurrent: Vec<RecurrentLayer>,
    /// Hidden dense layers (relu) followed by the output layer (linear; the
    /// forward pass applies softmax).
    pub head: Vec<DenseParams>,
}

/// Uniform draw in the symmetric interval `±sqrt(6/(fan_in+fan_out))`,
/// filled in row-major element order.
fn glorot(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-limit..limit)).collect())
        .expect("shape/data agree by construction")
}

fn init_cell(flavor: CellFlavor, input: usize, hidden: usize, rng: &mut ChaCha12Rng) -> Cell {
    match flavor {
        CellFlavor::Lstm => {
            let mut p = LstmParams {
                wx: glorot(rng, &[input, 4 * hidden], input, 4 * hidden),
                wh: glorot(rng, &[hidden, 4 * hidden], hidden, 4 * hidden),
                bias: Tensor::zeros(&[4 * hidden]),
            };
            // Open forget gates at the start so early gradients flow through
            // the cell state.
            for b in &mut p.bias.data_mut()[hidden..2 * hidden] {
                *b = 1.0;
            }
            Cell::Lstm(p)
        }
        CellFlavor::Gru => Cell::Gru(GruParams {
            wx: glorot(rng, &[input, 3 * hidden], input, 3 * hidden),
            wh: glorot(rng, &[hidden, 3 * hidden], hidden, 3 * hidden),
            bias_x: Tensor::zeros(&[3 * hidden]),
            bias_h: Tensor::zeros(&[3 * hidden]),
        }),
    }
}

impl Model {
    /// Builds the named architecture with all weights drawn deterministically
    /// from `seed`. Tensors are initialized in registry order (extractor
    /// blocks, recurrent layers, head), so equal seeds give bitwise-equal
    /// models.
    pub fn build(architecture: ArchitectureId, profile: &ScaleProfile, seed: u64) -> Result<Model> {
        profile.extractor_chain()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);

        let mut extractor = Vec::new();
        let mut cin = profile.input_shape[3];
        for &cout in &profile.conv_channels {
            let kernel = glorot(&mut rng, &[3, 3, 3, cin, cout], 27 * cin, 27 * cout);
            extractor.push(ConvBlock {
                conv: Conv3dParams::new(kernel, Tensor::zeros(&[cout]))?,
                norm: BatchNormState::new(cout),
            });
            cin = cout;
        }

        let hidden = profile.hidden_size;
        let layer_count = if architecture.stacked() { 2 } else { 1 };
        let mut recurrent = Vec::new();
        let mut width = profile.feature_width();
        for li in 0..layer_count {
            let return_mode = if li + 1 < layer_count { ReturnMode::All } else { ReturnMode::Last };
            let forward = init_cell(architecture.flavor(), width, hidden, &mut rng);
            let backward = architecture
                .bidirectional()
                .then(|| init_cell(architecture.flavor(), width, hidden, &mut rng));
            let layer = RecurrentLayer { forward, backward, return_mode };
            width = layer.output_width();
            recurrent.push(layer);
        }

        let mut head = Vec::new();
        for &w in &profile.head_widths {
            head.push(DenseParams::new(
                glorot(&mut rng, &[width, w], width, w),
                Tensor::zeros(&[w]),
                Activation::Relu,
            )?);
            width = w;
        }
        head.push(DenseParams::new(
            glorot(&mut rng, &[width, NUM_CLASSES], width, NUM_CLASSES),
            Tensor::zeros(&[NUM_CLASSES]),
            Activation::Linear,
        )?);

        Ok(Model {
            architecture,
            profile: profile.clone(),
            seed,
            dropout_rate: DEFAULT_DROPOUT_RATE,
            extractor,
            recurrent,
            head,
        })
    }

    /// Width of the feature vector entering the head.
    pub fn head_input_width(&self) -> usize {
        self.recurrent.last().expect("at least one layer").output_width()
    }

    /// Every parameter tensor with its registry name, including batch-norm
    /// running statistics. Checkpoints persist exactly this list.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.extractor.iter().enumerate() {
            out.push((format!("extractor.{i}.conv.kernel"), &b.conv.kernel));
            out.push((format!("extractor.{i}.conv.bias"), &b.conv.bias));
            out.push((format!("extractor.{i}.norm.gamma"), &b.norm.gamma));
            out.push((format!("extractor.{i}.norm.beta"), &b.norm.beta));
            out.push((format!("extractor.{i}.norm.running_mean"), &b.norm.running_mean));
            out.push((format!("extractor.{i}.norm.running_var"), &b.norm.running_var));
        }
        for (i, layer) in self.recurrent.iter().enumerate() {
            for (dir, cell) in std::iter::once(("fwd", &layer.forward))
                .chain(layer.backward.iter().map(|c| ("bwd", c)))
            {
                match cell {
                    Cell::Lstm(p) => {
                        out.push((format!("recurrent.{i}.{dir}.wx"), &p.wx));
                        out.push((format!("recurrent.{i}.{dir}.wh"), &p.wh));
                        out.push((format!("recurrent.{i}.{dir}.bias"), &p.bias));
                    }
                    Cell::Gru(p) => {
                        out.push((format!("recurrent.{i}.{dir}.wx"), &p.wx));
                        out.push((format!("recurrent.{i}.{dir}.wh"), &p.wh));
                        out.push((format!("recurrent.{i}.{dir}.bias_x"), &p.bias_x));
                        out.push((format!("recurrent.{i}.{dir}.bias_h"), &p.bias_h));
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

    /// Mutable view of the same registry, same names and order.
    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, b) in self.extractor.iter_mut().enumerate() {
            out.push((format!("extractor.{i}.conv.kernel"), &mut b.conv.kernel));
            out.push((format!("extractor.{i}.conv.bias"), &mut b.conv.bias));
            out.push((format!("extractor.{i}.norm.gamma"), &mut b.norm.gamma));
            out.push((format!("extractor.{i}.norm.beta"), &mut b.norm.beta));
            out.push((format!("extractor.{i}.norm.running_mean"), &mut b.norm.running_mean));
            out.push((format!("extractor.{i}.norm.running_var"), &mut b.norm.running_var));
        }
        for (i, layer) in self.recurrent.iter_mut().enumerate() {
            for (dir, cell) in std::iter::once(("fwd", &mut layer.forward))
                .chain(layer.backward.iter_mut().map(|c| ("bwd", c)))
            {
                match cell {
                    Cell::Lstm(p) => {
                        out.push((format!("recurrent.{i}.{dir}.wx"), &mut p.wx));
                        out.push((format!("recurrent.{i}.{dir}.wh"), &mut p.wh));
                        out.push((format!("recurrent.{i}.{dir}.bias"), &mut p.bias));
                    }
                    Cell::Gru(p) => {
                        out.push((format!("recurrent.{i}.{dir}.wx"), &mut p.wx));
                        out.push((format!("recurrent.{i}.{dir}.wh"), &mut p.wh));
                        out.push((format!("recurrent.{i}.{dir}.bias_x"), &mut p.bias_x));
                        out.push((format!("recurrent.{i}.{dir}.bias_h"), &mut p.bias_h));
                    }
                }
            }
        }
        for (i, d) in self.head.iter_mut().enumerate() {
            out.push((format!("head.{i}.weight"), &mut d.weight));
            out.push((format!("head.{i}.bias"), &mut d.bias));
        }
        out
    }

    /// Parameters the optimizer updates: everything except the batch-norm
    /// running statistics, in registry order.
    pub fn trainable_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.named_parameters_mut()
            .into_iter()
            .filter(|(name, _)| !name.contains(".running_"))
            .collect()
    }

    /// Total parameter count, running statistics included.
    pub fn total_parameters(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// One row of the per-layer accounting table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub layer: String,
    pub output_shape: String,
    pub params: usize,
}

impl LayerRow {
    pub fn new(layer: &str, output_shape: String, params: usize) -> Self {
        LayerRow { layer: layer.into(), output_shape, params }
    }
}

fn volume_shape(dims: &[usize; 4]) -> String {
    format!("(None, {}, {}, {}, {})", dims[0], dims[1], dims[2], dims[3])
}

/// Per-layer output shapes and parameter counts plus the total. Batch-norm
/// rows include their running statistics, so each counts 4 values per
/// channel.
pub fn count_parameters(model: &Model) -> (Vec<LayerRow>, usize) {
    let chain = model
        .profile
        .extractor_chain()
        .expect("profile was validated at build time");
    let mut rows = Vec::new();

    rows.push(LayerRow::new("InputLayer", format!("[{}]", volume_shape(&chain[0])), 0));
    for (i, block) in model.extractor.iter().enumerate() {
        let conv_shape = &chain[1 + 2 * i];
        let pool_shape = &chain[2 + 2 * i];
        rows.push(LayerRow::new("Conv3D", volume_shape(conv_shape), block.conv.param_count()));
        rows.push(LayerRow::new("MaxPooling3D", volume_shape(pool_shape), 0));
        rows.push(LayerRow::new(
            "BatchNormalization",
            volume_shape(pool_shape),
            block.norm.param_count(),
        ));
    }
    rows.push(LayerRow::new(
        "GlobalMaxPooling3D",
        format!("(None, {})", model.profile.feature_width()),
        0,
    ));

    for layer in &model.recurrent {
        let w = layer.output_width();
        let shape = match layer.return_mode {
            ReturnMode::All => format!("[(None, None, {w})]"),
            ReturnMode::Last => format!("[(None, {w})]"),
        };
        rows.push(LayerRow::new(model.architecture.cell_label(), shape, layer.param_count()));
    }

    let hidden = model.head.len() - 1;
    for (i, dense) in model.head.iter().enumerate() {
        let w = dense.out_features();
        rows.push(LayerRow::new("Dense", format!("[(None, {w})]"), dense.param_count()));
        // Dropout follows every hidden dense layer except the last one.
        if i + 1 < hidden {
            rows.push(LayerRow::new("Dropout", format!("[(None, {w})]"), 0));
        }
    }

    let total = rows.iter().map(|r| r.params).sum();
    (rows, total)
}

/// Formats an accounting table the way `inspect` prints it.
pub fn format_table(rows: &[LayerRow], total: usize) -> String {
    let mut out = String::new();
    let layer_w = rows.iter().map(|r| r.layer.len()).max().unwrap_or(0).max(12);
    let shape_w = rows.iter().map(|r| r.output_shape.len()).max().unwrap_or(0).max(12);
    out.push_str(&format!(
        "{:layer_w$}  {:shape_w$}  {}\n",
        "Layer (type)", "Output Shape", "Param"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:layer_w$}  {:shape_w$}  {}\n",
            r.layer, r.output_shape, r.params
        ));
    }
    out.push_str(&format!("Total params: {total}\n"));
    out
}

/// Checks two tables row by row; returns a human-readable list of
/// discrepancies, empty when they match.
pub fn diff_tables(actual: &[LayerRow], expected: &[LayerRow]) -> Vec<String> {
    let mut diffs = Vec::new();
    if actual.len() != expected.len() {
        diffs.push(format!(
            "row count differs: computed {} vs reference {}",
            actual.len(),
            expected.len()
        ));
    }
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        if a != e {
            diffs.push(format!(
                "row {i}: computed {} {} {} vs reference {} {} {}",
                a.layer, a.output_shape, a.params, e.layer, e.output_shape, e.params
            ));
        }
    }
    diffs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_builds_identical_models() {
        let profile = ScaleProfile::reduced();
        let a = Model::build(ArchitectureId::SbiLstm, &profile, 7).unwrap();
        let b = Model::build(ArchitectureId::SbiLstm, &profile, 7).unwrap();
        for ((na, ta), (nb, tb)) in a.named_parameters().iter().zip(b.named_parameters()) {
            assert_eq!(*na, nb);
            assert_eq!(ta.data(), tb.data(), "{na}");
        }
    }

    #[test]
    fn different_seeds_differ() {
        let profile = ScaleProfile::reduced();
        let a = Model::build(ArchitectureId::Gru, &profile, 1).unwrap();
        let b = Model::build(ArchitectureId::Gru, &profile, 2).unwrap();
        let ka = &a.extractor[0].conv.kernel;
        let kb = &b.extractor[0].conv.kernel;
        assert_ne!(ka, kb);
    }

    #[test]
    fn lstm_forget_bias_starts_at_one() {
        let model = Model::build(ArchitectureId::Lstm, &ScaleProfile::reduced(), 3).unwrap();
        let Cell::Lstm(p) = &model.recurrent[0].forward else { panic!("expected LSTM") };
        let h = p.hidden_size();
        assert!(p.bias.data()[..h].iter().all(|&v| v == 0.0));
        assert!(p.bias.data()[h..2 * h].iter().all(|&v| v == 1.0));
        assert!(p.bias.data()[2 * h..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn glorot_draws_stay_in_limit() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let t = glorot(&mut rng, &[64, 64], 64, 64);
        let limit = (6.0f64 / 128.0).sqrt();
        assert!(t.data().iter().all(|&v| v.abs() < limit));
        // Spread over the interval rather than collapsed near zero.
        assert!(t.data().iter().any(|&v| v.abs() > limit * 0.9));
    }

    #[test]
    fn stack_layout_per_architecture() {
        let p = ScaleProfile::reduced();
        let single = Model::build(ArchitectureId::Gru, &p, 0).unwrap();
        assert_eq!(single.recurrent.len(), 1);
        assert_eq!(single.recurrent[0].return_mode, ReturnMode::Last);
        assert!(single.recurrent[0].backward.is_none());

        let stacked = Model::build(ArchitectureId::SLstm, &p, 0).unwrap();
        assert_eq!(stacked.recurrent.len(), 2);
        assert_eq!(stacked.recurrent[0].return_mode, ReturnMode::All);
        assert_eq!(stacked.recurrent[1].return_mode, ReturnMode::Last);

        let bi = Model::build(ArchitectureId::SbiGru, &p, 0).unwrap();
        assert!(bi.recurrent.iter().all(|l| l.backward.is_some()));
        assert_eq!(bi.recurrent[0].output_width(), 2 * p.hidden_size);
        assert_eq!(bi.recurrent[1].forward.input_size(), 2 * p.hidden_size);
        assert_eq!(bi.head[0].in_features(), 2 * p.hidden_size);
    }

    #[test]
    fn trainable_excludes_running_stats() {
        let mut model = Model::build(ArchitectureId::Gru, &ScaleProfile::reduced(), 0).unwrap();
        let all = model.named_parameters().len();
        let trainable = model.trainable_parameters_mut().len();
        // Two running vectors per conv block.
        assert_eq!(all - trainable, 2 * model.extractor.len());
    }

    #[test]
    fn registry_names_are_unique() {
        let model = Model::build(ArchitectureId::SbiLstm, &ScaleProfile::reduced(), 0).unwrap();
        let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }

    #[test]
    fn head_ends_with_four_way_linear_layer() {
        let model = Model::build(ArchitectureId::Lstm, &ScaleProfile::reduced(), 0).unwrap();
        let last = model.head.last().unwrap();
        assert_eq!(last.out_features(), NUM_CLASSES);
        assert_eq!(last.activation, Activation::Linear);
        for hidden in &model.head[..model.head.len() - 1] {
            assert_eq!(hidden.activation, Activation::Relu);
        }
    }

    #[test]
    fn dense_param_count_closed_form_random_sizes() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n_in = rng.gen_range(1..200);
            let n_out = rng.gen_range(1..200);
            let d = DenseParams::new(
                Tensor::zeros(&[n_in, n_out]),
                Tensor::zeros(&[n_out]),
                Activation::Relu,
            )
            .unwrap();
            assert_eq!(d.param_count(), n_in * n_out + n_out);
        }
    }

    #[test]
    fn table_total_is_row_sum() {
        let model = Model::build(ArchitectureId::SGru, &ScaleProfile::reduced(), 0).unwrap();
        let (rows, total) = count_parameters(&model);
        assert_eq!(total, rows.iter().map(|r| r.params).sum::<usize>());
        assert_eq!(total, model.total_parameters());
    }

    #[test]
    fn reduced_table_has_three_dropout_rows() {
        let model = Model::build(ArchitectureId::Gru, &ScaleProfile::reduced(), 0).unwrap();
        let (rows, _) = count_parameters(&model);
        assert_eq!(rows.iter().filter(|r| r.layer == "Dropout").count(), 3);
    }
}
