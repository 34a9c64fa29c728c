//! Mini-batch training loop, evaluation bundle, and k-fold cross-validation.

use crate::data::LoadedSequence;
use crate::error::{Error, Result};
use crate::layers::{softmax_cross_entropy, validate_rate, Mode};
use crate::metrics::{
    confusion, macro_average, macro_summary, roc_ovr, ConfusionMatrix, MacroSummary, RocCurve,
};
use crate::model::{
    backward_batch, forward_batch, ArchitectureId, Model, ScaleProfile, NUM_CLASSES,
};
use crate::tensor::Tensor;
use crate::train::optimizer::{Optimizer, OptimizerKind};
use crate::train::split::{grouped_kfold, SplitIndices};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::fmt::Write as _;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Replaces the model's dropout rate for the run when set.
    pub dropout_override: Option<f64>,
    pub seed: u64,
    /// Keeps every reduction sequential so repeated runs are bitwise equal.
    pub deterministic: bool,
    pub profile: ScaleProfile,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 35,
            batch_size: 4,
            optimizer: OptimizerKind::default(),
            dropout_override: None,
            seed: 0,
            deterministic: true,
            profile: ScaleProfile::full(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Input("epoch count must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch size must be at least 1".into()));
        }
        self.optimizer.validate()?;
        if let Some(rate) = self.dropout_override {
            validate_rate(rate)?;
        }
        self.profile.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's samples.
    pub loss: f64,
    /// Fraction of training samples classified correctly during the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:.6},{:.6}", e.epoch, e.loss, e.accuracy);
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Runs `cfg.epochs` passes of shuffled mini-batch gradient descent over
/// `data`, updating `model` in place. Shuffling and dropout draw from
/// separate streams of the run seed, so a config fully determines the run.
pub fn train_model(
    model: &mut Model,
    data: &[LoadedSequence],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if let Some(rate) = cfg.dropout_override {
        model.dropout_rate = rate;
    }

    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let sequences: Vec<Vec<Tensor>> =
                chunk.iter().map(|&i| data[i].volumes.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].class_index()).collect();

            let (logits, cache) =
                forward_batch(model, &sequences, Mode::Train, Some(&mut dropout_rng))?;
            if logits.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite logits at epoch {epoch}, batch {batch_no}"
                )));
            }
            let ce = softmax_cross_entropy(&logits, &labels)?;
            if !ce.loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_no}"
                )));
            }
            loss_sum += ce.loss * chunk.len() as f64;
            hits += logits
                .argmax_last()?
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();

            let grads = backward_batch(model, &cache, &ce.grad_logits)?;
            {
                let named = grads.named();
                let grad_blocks: Vec<(String, &Tensor)> =
                    named.iter().map(|(n, t)| (n.clone(), *t)).collect();
                let mut params = model.trainable_parameters_mut();
                optimizer.step(&mut params, &grad_blocks)?;
            }
            model.commit_running_stats(&cache);
        }
        history.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: hits as f64 / data.len() as f64,
        });
    }
    Ok(history)
}

/// Inference-mode metrics over a labelled set: confusion matrix, macro
/// summary, and one-vs-rest ROC per class using softmax probabilities.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub summary: MacroSummary,
    pub roc: Vec<RocCurve>,
    pub macro_auc: f64,
    /// `[n, K]` softmax probabilities in input order.
    pub probabilities: Tensor,
    pub y_true: Vec<usize>,
    pub y_pred: Vec<usize>,
}

impl EvalReport {
    pub fn per_class_auc(&self) -> Vec<f64> {
        self.roc.iter().map(|c| c.auc).collect()
    }
}

pub fn evaluate(model: &Model, data: &[LoadedSequence]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let mut rows = Vec::with_capacity(data.len() * NUM_CLASSES);
    let mut y_true = Vec::with_capacity(data.len());
    for seq in data {
        let probs = model.predict(&seq.volumes)?;
        rows.extend_from_slice(probs.data());
        y_true.push(seq.class_index());
    }
    let probabilities = Tensor::from_vec(&[data.len(), NUM_CLASSES], rows)?;
    let y_pred = probabilities.argmax_last()?;
    let cm = confusion(&y_true, &y_pred, NUM_CLASSES)?;
    let summary = macro_summary(&cm);
    let roc: Vec<RocCurve> = (0..NUM_CLASSES)
        .map(|class| roc_ovr(&y_true, &probabilities, class))
        .collect::<Result<_>>()?;
    let macro_auc = macro_average(&roc.iter().map(|c| c.auc).collect::<Vec<_>>());
    Ok(EvalReport { confusion: cm, summary, roc, macro_auc, probabilities, y_true, y_pred })
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub split: SplitIndices,
    pub confusion: ConfusionMatrix,
    pub summary: MacroSummary,
    pub macro_auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricStats {
    pub mean: f64,
    /// Population standard deviation over folds.
    pub stddev: f64,
}

fn stats_over(values: &[f64]) -> MetricStats {
    let mean = macro_average(values);
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / values.len().max(1) as f64;
    MetricStats { mean, stddev: var.sqrt() }
}

#[derive(Debug, Clone)]
pub struct FoldReport {
    pub folds: Vec<FoldOutcome>,
    pub accuracy: MetricStats,
    pub precision: MetricStats,
    pub recall: MetricStats,
    pub f1: MetricStats,
    pub macro_auc: MetricStats,
}

impl FoldReport {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("fold,accuracy,precision,recall,f1,macro_ovr_auc\n");
        for (i, fold) in self.folds.iter().enumerate() {
            let s = &fold.summary;
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                i + 1,
                s.accuracy,
                s.precision,
                s.recall,
                s.f1,
                fold.macro_auc
            );
        }
        let _ = writeln!(
            out,
            "mean,{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.accuracy.mean, self.precision.mean, self.recall.mean, self.f1.mean,
            self.macro_auc.mean
        );
        let _ = writeln!(
            out,
            "stddev,{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.accuracy.stddev,
            self.precision.stddev,
            self.recall.stddev,
            self.f1.stddev,
            self.macro_auc.stddev
        );
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "folds={}", self.k());
        for (name, stats) in [
            ("macro_accuracy", self.accuracy),
            ("macro_precision", self.precision),
            ("macro_recall", self.recall),
            ("macro_f1", self.f1),
            ("macro_ovr_auc", self.macro_auc),
        ] {
            let _ = writeln!(out, "{name}_mean={:.6}", stats.mean);
            let _ = writeln!(out, "{name}_stddev={:.6}", stats.stddev);
        }
        out
    }
}

/// Trains one fresh model per patient-disjoint fold, all built from the
/// same seed, and aggregates the fold metrics. `jobs > 1` runs folds on a
/// thread pool of that width.
pub fn kfold_cross_validate(
    architecture: ArchitectureId,
    data: &[LoadedSequence],
    k: usize,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<FoldReport> {
    cfg.validate()?;
    let patients: Vec<&str> = data.iter().map(|s| s.patient_id.as_str()).collect();
    let folds = grouped_kfold(&patients, k, cfg.seed)?;

    let run_fold = |split: &SplitIndices| -> Result<FoldOutcome> {
        let train_set: Vec<LoadedSequence> =
            split.train.iter().map(|&i| data[i].clone()).collect();
        let val_set: Vec<LoadedSequence> =
            split.test.iter().map(|&i| data[i].clone()).collect();
        let mut model = Model::build(architecture, &cfg.profile, cfg.seed)?;
        train_model(&mut model, &train_set, cfg)?;
        let eval = evaluate(&model, &val_set)?;
        Ok(FoldOutcome {
            split: split.clone(),
            confusion: eval.confusion,
            summary: eval.summary,
            macro_auc: eval.macro_auc,
        })
    };

    let outcomes: Result<Vec<FoldOutcome>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Input(format!("worker pool: {e}")))?;
        pool.install(|| folds.par_iter().map(run_fold).collect())
    } else {
        folds.iter().map(run_fold).collect()
    };
    let folds = outcomes?;

    let pick = |f: fn(&FoldOutcome) -> f64| -> MetricStats {
        stats_over(&folds.iter().map(f).collect::<Vec<_>>())
    };
    Ok(FoldReport {
        accuracy: pick(|f| f.summary.accuracy),
        precision: pick(|f| f.summary.precision),
        recall: pick(|f| f.summary.recall),
        f1: pick(|f| f.summary.f1),
        macro_auc: pick(|f| f.macro_auc),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn micro_profile() -> ScaleProfile {
        ScaleProfile {
            name: "micro".into(),
            input_shape: [8, 8, 4, 1],
            conv_channels: vec![4],
            hidden_size: 5,
            head_widths: vec![6],
        }
    }

    fn micro_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            profile: micro_profile(),
            ..TrainConfig::default()
        }
    }

    /// Class-separable toy volumes: class c has mean level 0.2*c plus noise.
    fn toy_data(per_class: usize, visits: usize, seed: u64) -> Vec<LoadedSequence> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for class in 1..=4u8 {
            for p in 0..per_class {
                let volumes = (0..visits)
                    .map(|_| {
                        Tensor::from_vec(
                            &[8, 8, 4, 1],
                            (0..8 * 8 * 4)
                                .map(|_| 0.2 * class as f64 + rng.gen_range(-0.05..0.05))
                                .collect(),
                        )
                        .unwrap()
                    })
                    .collect();
                out.push(LoadedSequence {
                    patient_id: format!("C{class}P{p:03}"),
                    provenance: Provenance::Original,
                    label: class,
                    volumes,
                });
            }
        }
        out
    }

    fn non_running_params(model: &Model) -> Vec<(String, Vec<f64>)> {
        model
            .named_parameters()
            .into_iter()
            .filter(|(name, _)| !name.contains("running"))
            .map(|(name, t)| (name, t.data().to_vec()))
            .collect()
    }

    #[test]
    fn zero_learning_rate_changes_nothing_and_reports_chance_loss() {
        let data = toy_data(2, 2, 1);
        let mut model = Model::build(ArchitectureId::Lstm, &micro_profile(), 3).unwrap();
        let before = non_running_params(&model);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::adam(0.0),
            ..micro_config(2)
        };
        let history = train_model(&mut model, &data, &cfg).unwrap();
        assert_eq!(non_running_params(&model), before);
        assert_eq!(history.epochs.len(), 2);
        let ln4 = (4.0f64).ln();
        assert!(
            (history.epochs[0].loss - ln4).abs() < 0.2,
            "epoch-1 loss {} vs ln4 {ln4}",
            history.epochs[0].loss
        );
    }

    #[test]
    fn training_is_reproducible_from_the_config() {
        let data = toy_data(2, 2, 5);
        let cfg = micro_config(3);
        let run = || {
            let mut model = Model::build(ArchitectureId::SGru, &micro_profile(), 7).unwrap();
            let history = train_model(&mut model, &data, &cfg).unwrap();
            let params: Vec<(String, Vec<f64>)> = model
                .named_parameters()
                .into_iter()
                .map(|(n, t)| (n, t.data().to_vec()))
                .collect();
            (history, params)
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn loss_decreases_on_learnable_toy_data() {
        let data = toy_data(3, 2, 9);
        let mut model = Model::build(ArchitectureId::Gru, &micro_profile(), 11).unwrap();
        let cfg = TrainConfig { dropout_override: Some(0.0), ..micro_config(12) };
        let history = train_model(&mut model, &data, &cfg).unwrap();
        let first = history.epochs.first().unwrap().loss;
        let last = history.epochs.last().unwrap().loss;
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn one_sequence_is_overfit_within_two_hundred_steps() {
        let volumes = {
            let mut rng = ChaCha12Rng::seed_from_u64(21);
            (0..2)
                .map(|_| {
                    Tensor::from_vec(
                        &[32, 32, 16, 1],
                        (0..32 * 32 * 16).map(|_| rng.gen_range(0.0..1.0)).collect(),
                    )
                    .unwrap()
                })
                .collect::<Vec<_>>()
        };
        let data = vec![LoadedSequence {
            patient_id: "C2P000".into(),
            provenance: Provenance::Original,
            label: 2,
            volumes,
        }];
        let mut model =
            Model::build(ArchitectureId::Lstm, &ScaleProfile::reduced(), 13).unwrap();
        let base = TrainConfig {
            batch_size: 1,
            dropout_override: Some(0.0),
            profile: ScaleProfile::reduced(),
            ..TrainConfig::default()
        };

        let first = train_model(&mut model, &data, &TrainConfig { epochs: 50, ..base.clone() })
            .unwrap();
        let losses: Vec<f64> = first.epochs.iter().map(|e| e.loss).collect();

        // Ten-step moving average is non-increasing once past epoch 5.
        let smoothed: Vec<f64> = losses
            .windows(10)
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect();
        for pair in smoothed[5..].windows(2) {
            assert!(pair[1] <= pair[0] + 1e-6, "smoothed loss rose: {pair:?}");
        }

        let mut best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut steps = losses.len();
        while best >= 0.01 && steps < 200 {
            let chunk = 50.min(200 - steps);
            let more = train_model(
                &mut model,
                &data,
                &TrainConfig { epochs: chunk, ..base.clone() },
            )
            .unwrap();
            best = more.epochs.iter().map(|e| e.loss).fold(best, f64::min);
            steps += chunk;
        }
        assert!(best < 0.01, "loss only reached {best} after {steps} steps");
    }

    #[test]
    fn poisoned_parameters_report_divergence_with_location() {
        let data = toy_data(1, 2, 2);
        let mut model = Model::build(ArchitectureId::Gru, &micro_profile(), 1).unwrap();
        {
            let mut params = model.trainable_parameters_mut();
            let last = params.last_mut().unwrap();
            last.1.data_mut()[0] = f64::INFINITY;
        }
        let err = train_model(&mut model, &data, &micro_config(1)).unwrap_err();
        match err {
            Error::Divergence(msg) => assert!(msg.contains("epoch 1"), "{msg}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig { epochs: 0, ..micro_config(1) }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..micro_config(1) }.validate().is_err());
        assert!(TrainConfig { dropout_override: Some(1.0), ..micro_config(1) }
            .validate()
            .is_err());
        assert!(micro_config(1).validate().is_ok());
    }

    fn rigged_constant_model() -> Model {
        let mut model = Model::build(ArchitectureId::Gru, &micro_profile(), 2).unwrap();
        let last = model.head.last_mut().unwrap();
        for v in last.weight.data_mut() {
            *v = 0.0;
        }
        let bias = last.bias.data_mut();
        bias.fill(0.0);
        bias[0] = 1.0;
        model
    }

    #[test]
    fn constant_predictor_yields_quarter_recall_and_half_auc() {
        let model = rigged_constant_model();
        let data = toy_data(3, 2, 4);
        let report = evaluate(&model, &data).unwrap();
        assert!(report.y_pred.iter().all(|&p| p == 0));
        assert!((report.summary.recall - 0.25).abs() < 1e-12);
        assert!((report.macro_auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn evaluation_is_idempotent() {
        let data = toy_data(2, 2, 6);
        let model = Model::build(ArchitectureId::Lstm, &micro_profile(), 8).unwrap();
        let a = evaluate(&model, &data).unwrap();
        let b = evaluate(&model, &data).unwrap();
        assert_eq!(a.confusion, b.confusion);
        assert_eq!(a.probabilities.data(), b.probabilities.data());
        assert_eq!(a.macro_auc, b.macro_auc);
    }

    #[test]
    fn two_fold_cross_validation_reports_and_aggregates() {
        let data = toy_data(10, 2, 14);
        let cfg = TrainConfig { dropout_override: Some(0.0), ..micro_config(2) };
        let report =
            kfold_cross_validate(ArchitectureId::Gru, &data, 2, &cfg, 1).unwrap();
        assert_eq!(report.k(), 2);

        let accs: Vec<f64> = report.folds.iter().map(|f| f.summary.accuracy).collect();
        assert!((report.accuracy.mean - macro_average(&accs)).abs() < 1e-15);

        for fold in &report.folds {
            let val_patients: BTreeSet<&str> =
                fold.split.test.iter().map(|&i| data[i].patient_id.as_str()).collect();
            let train_patients: BTreeSet<&str> =
                fold.split.train.iter().map(|&i| data[i].patient_id.as_str()).collect();
            assert!(val_patients.is_disjoint(&train_patients));
        }
    }

    #[test]
    fn history_and_fold_tables_parse_as_csv() {
        let history = TrainHistory {
            epochs: vec![
                EpochStats { epoch: 1, loss: 1.5, accuracy: 0.25 },
                EpochStats { epoch: 2, loss: 1.1, accuracy: 0.5 },
            ],
        };
        let history_csv = history.csv();
        let mut rdr = csv::Reader::from_reader(history_csv.as_bytes());
        assert_eq!(rdr.records().count(), 2);

        let outcome = FoldOutcome {
            split: SplitIndices { train: vec![0], test: vec![1] },
            confusion: confusion(&[0], &[0], 4).unwrap(),
            summary: MacroSummary { accuracy: 1.0, precision: 1.0, recall: 1.0, f1: 1.0 },
            macro_auc: 1.0,
        };
        let report = FoldReport {
            accuracy: stats_over(&[1.0]),
            precision: stats_over(&[1.0]),
            recall: stats_over(&[1.0]),
            f1: stats_over(&[1.0]),
            macro_auc: stats_over(&[1.0]),
            folds: vec![outcome],
        };
        let report_csv = report.csv();
        let mut rdr = csv::Reader::from_reader(report_csv.as_bytes());
        assert_eq!(rdr.records().count(), 3);
        assert!(report.summary_text().contains("macro_f1_mean=1.000000"));
    }
}
