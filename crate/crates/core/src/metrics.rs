//! Confusion matrices, macro-averaged summary metrics, and one-vs-rest
//! ROC/AUC, plus plain-text and CSV report emitters.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fmt::Write as _;

/// K-by-K counts; rows are true classes, columns are predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<usize>,
}

/// Cell (i, j) counts samples with true class i predicted as class j.
pub fn confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if k == 0 {
        return Err(Error::Input("need at least one class".into()));
    }
    let mut counts = vec![0usize; k * k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= k || p >= k {
            return Err(Error::Label(format!(
                "label pair ({t}, {p}) outside 0..{k}"
            )));
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn count(&self, true_class: usize, pred_class: usize) -> usize {
        self.counts[true_class * self.k + pred_class]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.k).map(|i| self.count(i, i)).sum()
    }

    pub fn true_positives(&self, class: usize) -> usize {
        self.count(class, class)
    }

    pub fn false_positives(&self, class: usize) -> usize {
        (0..self.k).filter(|&i| i != class).map(|i| self.count(i, class)).sum()
    }

    pub fn false_negatives(&self, class: usize) -> usize {
        (0..self.k).filter(|&j| j != class).map(|j| self.count(class, j)).sum()
    }

    pub fn true_negatives(&self, class: usize) -> usize {
        self.total()
            - self.true_positives(class)
            - self.false_positives(class)
            - self.false_negatives(class)
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        (0..self.k)
            .map(|i| self.counts[i * self.k..(i + 1) * self.k].to_vec())
            .collect()
    }
}

/// Macro-averaged metrics: unweighted means of per-class values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Unweighted mean.
pub fn macro_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Per-class accuracy (TP+TN)/total, precision TP/(TP+FP), and recall
/// TP/(TP+FN) averaged over classes; F1 is the harmonic mean of the macro
/// precision and macro recall. Zero denominators contribute 0.
pub fn macro_summary(cm: &ConfusionMatrix) -> MacroSummary {
    let total = cm.total();
    let mut acc = Vec::with_capacity(cm.k());
    let mut prec = Vec::with_capacity(cm.k());
    let mut rec = Vec::with_capacity(cm.k());
    for class in 0..cm.k() {
        let tp = cm.true_positives(class);
        let fp = cm.false_positives(class);
        let fn_ = cm.false_negatives(class);
        let tn = cm.true_negatives(class);
        acc.push(ratio(tp + tn, total));
        prec.push(ratio(tp, tp + fp));
        rec.push(ratio(tp, tp + fn_));
    }
    let precision = macro_average(&prec);
    let recall = macro_average(&rec);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    MacroSummary { accuracy: macro_average(&acc), precision, recall, f1 }
}

/// One-vs-rest ROC curve with its trapezoidal AUC.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// (false-positive rate, true-positive rate), from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Sweeps thresholds over the distinct scores of column `class`,
/// treating that class as positive and the rest as negative.
pub fn roc_ovr(y_true: &[usize], scores: &Tensor, class: usize) -> Result<RocCurve> {
    if scores.rank() != 2 {
        return Err(Error::Shape(format!(
            "scores must be [n, K], got {:?}",
            scores.shape()
        )));
    }
    let (n, k) = (scores.shape()[0], scores.shape()[1]);
    if y_true.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} score rows", y_true.len())));
    }
    if class >= k {
        return Err(Error::Label(format!("class {class} outside 0..{k}")));
    }
    if let Some(&bad) = y_true.iter().find(|&&t| t >= k) {
        return Err(Error::Label(format!("label {bad} outside 0..{k}")));
    }
    if scores.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("scores must be finite".into()));
    }

    let positives = y_true.iter().filter(|&&t| t == class).count();
    let negatives = n - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Degenerate(format!(
            "class {class} has {positives} positives and {negatives} negatives"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let column = |i: usize| scores.data()[i * k + class];
    order.sort_by(|&a, &b| column(b).partial_cmp(&column(a)).expect("finite scores"));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut idx = 0;
    while idx < n {
        // Consume a whole group of tied scores before emitting a point, so
        // ties produce a diagonal segment (half credit under the trapezoid).
        let threshold = column(order[idx]);
        while idx < n && column(order[idx]) == threshold {
            if y_true[order[idx]] == class {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        let prev = *points.last().expect("seeded with the origin");
        let next = (fp as f64 / negatives as f64, tp as f64 / positives as f64);
        auc += (next.0 - prev.0) * (prev.1 + next.1) / 2.0;
        points.push(next);
    }
    Ok(RocCurve { points, auc })
}

/// Unweighted mean of the per-class one-vs-rest AUCs; every class must
/// appear among the labels.
pub fn macro_ovr_auc(y_true: &[usize], scores: &Tensor) -> Result<f64> {
    if scores.rank() != 2 {
        return Err(Error::Shape(format!(
            "scores must be [n, K], got {:?}",
            scores.shape()
        )));
    }
    let k = scores.shape()[1];
    let aucs: Vec<f64> = (0..k)
        .map(|class| roc_ovr(y_true, scores, class).map(|c| c.auc))
        .collect::<Result<_>>()?;
    Ok(macro_average(&aucs))
}

/// `key=value` lines for logs and quick diffing.
pub fn summary_key_values(summary: &MacroSummary, macro_auc: Option<f64>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "macro_accuracy={:.6}", summary.accuracy);
    let _ = writeln!(out, "macro_precision={:.6}", summary.precision);
    let _ = writeln!(out, "macro_recall={:.6}", summary.recall);
    let _ = writeln!(out, "macro_f1={:.6}", summary.f1);
    if let Some(auc) = macro_auc {
        let _ = writeln!(out, "macro_ovr_auc={auc:.6}");
    }
    out
}

/// Machine-readable `metric,value` table covering the macro summary and
/// the per-class AUCs.
pub fn metrics_csv(summary: &MacroSummary, per_class_auc: &[f64]) -> String {
    let mut out = String::from("metric,value\n");
    let _ = writeln!(out, "macro_accuracy,{:.6}", summary.accuracy);
    let _ = writeln!(out, "macro_precision,{:.6}", summary.precision);
    let _ = writeln!(out, "macro_recall,{:.6}", summary.recall);
    let _ = writeln!(out, "macro_f1,{:.6}", summary.f1);
    for (i, auc) in per_class_auc.iter().enumerate() {
        let _ = writeln!(out, "ovr_auc_class_{},{auc:.6}", i + 1);
    }
    if !per_class_auc.is_empty() {
        let _ = writeln!(out, "macro_ovr_auc,{:.6}", macro_average(per_class_auc));
    }
    out
}

/// Two-column `fpr tpr` text, one curve point per line.
pub fn roc_points_text(curve: &RocCurve) -> String {
    let mut out = String::new();
    for (fpr, tpr) in &curve.points {
        let _ = writeln!(out, "{fpr:.6} {tpr:.6}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Pairwise rank statistic: P(score of a positive > score of a
    /// negative), ties counted half.
    fn rank_auc(y_true: &[usize], scores: &Tensor, class: usize) -> f64 {
        let k = scores.shape()[1];
        let col: Vec<f64> = y_true
            .iter()
            .enumerate()
            .map(|(i, _)| scores.data()[i * k + class])
            .collect();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &t) in y_true.iter().enumerate() {
            if t != class {
                continue;
            }
            for (j, &u) in y_true.iter().enumerate() {
                if u == class {
                    continue;
                }
                pairs += 1.0;
                if col[i] > col[j] {
                    wins += 1.0;
                } else if col[i] == col[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_predictions_give_a_diagonal_matrix() {
        let y = [0usize, 1, 2, 3, 2, 1];
        let cm = confusion(&y, &y, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expected = y.iter().filter(|&&t| t == i).count();
                assert_eq!(cm.count(i, j), if i == j { expected } else { 0 });
            }
        }
    }

    #[test]
    fn hand_counted_two_class_matrix() {
        let cm = confusion(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn empty_input_gives_zeros() {
        let cm = confusion(&[], &[], 3).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.rows(), vec![vec![0; 3]; 3]);
    }

    #[test]
    fn out_of_range_labels_rejected() {
        assert!(confusion(&[0, 4], &[0, 0], 4).is_err());
        assert!(confusion(&[0, 0], &[0, 7], 4).is_err());
        assert!(confusion(&[0], &[0, 1], 4).is_err());
    }

    #[test]
    fn per_class_cells_partition_the_total() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let y_true: Vec<usize> = (0..200).map(|_| rng.gen_range(0..4)).collect();
        let y_pred: Vec<usize> = (0..200).map(|_| rng.gen_range(0..4)).collect();
        let cm = confusion(&y_true, &y_pred, 4).unwrap();
        assert_eq!(cm.total(), 200);
        for class in 0..4 {
            let sum = cm.true_positives(class)
                + cm.false_positives(class)
                + cm.false_negatives(class)
                + cm.true_negatives(class);
            assert_eq!(sum, 200);
        }
    }

    #[test]
    fn micro_recall_equals_overall_accuracy() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let y_true: Vec<usize> = (0..150).map(|_| rng.gen_range(0..3)).collect();
        let y_pred: Vec<usize> = (0..150).map(|_| rng.gen_range(0..3)).collect();
        let cm = confusion(&y_true, &y_pred, 3).unwrap();
        let direct =
            y_true.iter().zip(&y_pred).filter(|(a, b)| a == b).count() as f64 / 150.0;
        assert!((cm.trace() as f64 / cm.total() as f64 - direct).abs() < 1e-15);
    }

    #[test]
    fn perfect_classifier_scores_one_everywhere() {
        let y = [0usize, 1, 2, 3];
        let cm = confusion(&y, &y, 4).unwrap();
        let s = macro_summary(&cm);
        assert_eq!(
            (s.accuracy, s.precision, s.recall, s.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn hand_computed_macro_precision_and_recall() {
        let cm = confusion(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        let s = macro_summary(&cm);
        assert!((s.precision - 5.0 / 6.0).abs() < 1e-15);
        assert!((s.recall - 3.0 / 4.0).abs() < 1e-15);
        let expected_f1 = 2.0 * (5.0 / 6.0) * (3.0 / 4.0) / (5.0 / 6.0 + 3.0 / 4.0);
        assert!((s.f1 - expected_f1).abs() < 1e-15);
    }

    #[test]
    fn per_class_accuracy_definitions_on_the_hand_example() {
        // Reported metric: (TP+TN)/total per class. The TP/(TP+TN) ratio is
        // checked here as a diagnostic but is never emitted.
        let cm = confusion(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        let standard0 = (cm.true_positives(0) + cm.true_negatives(0)) as f64 / 4.0;
        let standard1 = (cm.true_positives(1) + cm.true_negatives(1)) as f64 / 4.0;
        assert_eq!(standard0, 0.75);
        assert_eq!(standard1, 0.75);
        assert!((macro_summary(&cm).accuracy - 0.75).abs() < 1e-15);

        let alt0 = cm.true_positives(0) as f64
            / (cm.true_positives(0) + cm.true_negatives(0)) as f64;
        let alt1 = cm.true_positives(1) as f64
            / (cm.true_positives(1) + cm.true_negatives(1)) as f64;
        assert!((alt0 - 1.0 / 3.0).abs() < 1e-15);
        assert!((alt1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_predictions_on_balanced_data() {
        let y_true: Vec<usize> = (0..16).map(|i| i % 4).collect();
        let y_pred = vec![2usize; 16];
        let s = macro_summary(&confusion(&y_true, &y_pred, 4).unwrap());
        assert!((s.recall - 0.25).abs() < 1e-15);
        // Three classes have empty prediction columns, so their precision
        // terms are zero; the predicted class scores 4/16.
        assert!((s.precision - (0.25 + 0.0 + 0.0 + 0.0) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_matrix_yields_zero_metrics() {
        let cm = confusion(&[], &[], 4).unwrap();
        let s = macro_summary(&cm);
        assert_eq!((s.accuracy, s.precision, s.recall, s.f1), (0.0, 0.0, 0.0, 0.0));
    }

    fn two_class_scores(pos_scores: &[f64], neg_scores: &[f64]) -> (Vec<usize>, Tensor) {
        let mut y = Vec::new();
        let mut rows = Vec::new();
        for &s in pos_scores {
            y.push(1usize);
            rows.extend_from_slice(&[1.0 - s, s]);
        }
        for &s in neg_scores {
            y.push(0usize);
            rows.extend_from_slice(&[1.0 - s, s]);
        }
        let n = y.len();
        (y, Tensor::from_vec(&[n, 2], rows).unwrap())
    }

    #[test]
    fn separated_scores_have_unit_auc() {
        let (y, s) = two_class_scores(&[0.9, 0.8, 0.7], &[0.3, 0.2, 0.1]);
        let curve = roc_ovr(&y, &s, 1).unwrap();
        assert_eq!(curve.auc, 1.0);
        assert_eq!(*curve.points.first().unwrap(), (0.0, 0.0));
        assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
    }

    #[test]
    fn anti_separated_scores_have_zero_auc() {
        let (y, s) = two_class_scores(&[0.1, 0.2], &[0.8, 0.9]);
        assert_eq!(roc_ovr(&y, &s, 1).unwrap().auc, 0.0);
    }

    #[test]
    fn all_tied_scores_have_half_auc() {
        let (y, s) = two_class_scores(&[0.5, 0.5, 0.5], &[0.5, 0.5]);
        let curve = roc_ovr(&y, &s, 1).unwrap();
        assert!((curve.auc - 0.5).abs() < 1e-15);
        assert_eq!(curve.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!((rank_auc(&y, &s, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_one_sided_labels_rejected() {
        let (y, s) = two_class_scores(&[0.7, 0.6], &[]);
        assert!(matches!(roc_ovr(&y, &s, 1), Err(Error::Degenerate(_))));
        assert!(matches!(roc_ovr(&y, &s, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn non_finite_scores_rejected() {
        let (y, mut s) = two_class_scores(&[0.7], &[0.2]);
        s.data_mut()[1] = f64::NAN;
        assert!(roc_ovr(&y, &s, 1).is_err());
    }

    #[test]
    fn trapezoid_matches_the_rank_statistic_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for trial in 0..100 {
            let n = rng.gen_range(4..=500);
            let k = rng.gen_range(2..=5);
            let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            // Quantized scores force plenty of ties.
            let s = Tensor::from_vec(
                &[n, k],
                (0..n * k)
                    .map(|_| (rng.gen_range(0..8) as f64) / 8.0)
                    .collect(),
            )
            .unwrap();
            for class in 0..k {
                match roc_ovr(&y, &s, class) {
                    Ok(curve) => {
                        let oracle = rank_auc(&y, &s, class);
                        assert!(
                            (curve.auc - oracle).abs() <= 1e-12,
                            "trial {trial} class {class}: {} vs {oracle}",
                            curve.auc
                        );
                    }
                    Err(Error::Degenerate(_)) => {}
                    Err(other) => panic!("{other:?}"),
                }
            }
        }
    }

    #[test]
    fn curve_is_monotone_from_origin_to_one_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let n = 120;
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let s = Tensor::from_vec(
            &[n, 3],
            (0..n * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        for class in 0..3 {
            let curve = roc_ovr(&y, &s, class).unwrap();
            assert_eq!(*curve.points.first().unwrap(), (0.0, 0.0));
            assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
            for pair in curve.points.windows(2) {
                assert!(pair[1].0 >= pair[0].0);
                assert!(pair[1].1 >= pair[0].1);
            }
        }
    }

    #[test]
    fn auc_is_invariant_under_strictly_increasing_transforms() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 80;
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let s = Tensor::from_vec(
            &[n, 2],
            (0..n * 2).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let base = roc_ovr(&y, &s, 1).unwrap().auc;
        for transform in [|x: f64| x.exp(), |x: f64| 3.0 * x + 11.0, |x: f64| x.powi(3)] {
            let mapped = s.map(transform);
            let auc = roc_ovr(&y, &mapped, 1).unwrap().auc;
            assert!((auc - base).abs() < 1e-12);
        }
    }

    #[test]
    fn macro_auc_of_a_perfect_classifier_is_one() {
        let y = [0usize, 1, 2, 3, 0, 1, 2, 3];
        let mut rows = Vec::new();
        for &t in &y {
            for class in 0..4 {
                rows.push(if class == t { 0.9 } else { 0.02 });
            }
        }
        let s = Tensor::from_vec(&[8, 4], rows).unwrap();
        assert_eq!(macro_ovr_auc(&y, &s).unwrap(), 1.0);
    }

    #[test]
    fn macro_auc_requires_every_class_present() {
        let y = [0usize, 0, 1, 1];
        let s = Tensor::from_vec(&[4, 3], vec![0.2; 12]).unwrap();
        assert!(macro_ovr_auc(&y, &s).is_err());
    }

    #[test]
    fn random_scores_sit_near_one_half() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let n = 400;
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let s = Tensor::from_vec(
            &[n, 4],
            (0..n * 4).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let auc = macro_ovr_auc(&y, &s).unwrap();
        assert!((auc - 0.5).abs() < 0.05, "{auc}");
    }

    #[test]
    fn averaging_reported_per_class_aucs() {
        let per_class = [0.994, 0.875, 0.863, 0.944];
        let macro_auc = macro_average(&per_class);
        assert!((macro_auc - 0.919).abs() < 0.0005, "{macro_auc}");
    }

    #[test]
    fn key_value_report_shape() {
        let s = MacroSummary { accuracy: 0.9, precision: 0.8, recall: 0.7, f1: 0.746666 };
        let text = summary_key_values(&s, Some(0.95));
        assert!(text.contains("macro_accuracy=0.900000\n"));
        assert!(text.contains("macro_ovr_auc=0.950000\n"));
        let without = summary_key_values(&s, None);
        assert!(!without.contains("macro_ovr_auc"));
        for line in without.lines() {
            assert_eq!(line.split('=').count(), 2);
        }
    }

    #[test]
    fn csv_report_parses_back() {
        let s = MacroSummary { accuracy: 0.9, precision: 0.8, recall: 0.7, f1: 0.75 };
        let text = metrics_csv(&s, &[0.91, 0.92, 0.93, 0.94]);
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        assert_eq!(
            rdr.headers().unwrap().iter().collect::<Vec<_>>(),
            vec!["metric", "value"]
        );
        let rows: Vec<(String, f64)> = rdr
            .records()
            .map(|r| {
                let r = r.unwrap();
                (r[0].to_string(), r[1].parse().unwrap())
            })
            .collect();
        assert_eq!(rows.len(), 9);
        assert_eq!(rows[0].0, "macro_accuracy");
        let macro_auc = rows.iter().find(|(k, _)| k == "macro_ovr_auc").unwrap();
        assert!((macro_auc.1 - 0.925).abs() < 1e-9);
    }

    #[test]
    fn roc_point_file_is_two_columns() {
        let curve = RocCurve { points: vec![(0.0, 0.0), (0.25, 0.75), (1.0, 1.0)], auc: 0.75 };
        let text = roc_points_text(&curve);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        for line in lines {
            let cols: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(cols.len(), 2);
            cols[0].parse::<f64>().unwrap();
            cols[1].parse::<f64>().unwrap();
        }
    }
}
