//! Per-label decision thresholds, F1 metrics, and evaluation reports.
//!
//! Thresholds are searched on validation scores over the 21-value grid
//! {0.00, 0.05, ..., 1.00} with the inclusive decision rule
//! `predict positive iff score >= T`. Ties break toward the smallest
//! threshold. Because macro-F1 is the unweighted mean of independent
//! per-label F1 scores, maximizing each label separately maximizes macro-F1
//! over the grid.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::corpus::Partition;
use crate::error::{Error, Result};

/// Scores aligned with gold for one partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionMatrix {
    /// `instances x labels`, each in [0, 1].
    pub scores: Array2<f64>,
    /// Same shape, binary.
    pub gold: Array2<f64>,
    pub labels: Vec<String>,
    pub space_name: String,
    pub partition: Partition,
}

impl PredictionMatrix {
    pub fn new(
        scores: Array2<f64>,
        gold: Array2<f64>,
        labels: Vec<String>,
        space_name: impl Into<String>,
        partition: Partition,
    ) -> Result<Self> {
        if scores.dim() != gold.dim() {
            return Err(Error::ShapeMismatch(format!(
                "scores {:?} vs gold {:?}",
                scores.dim(),
                gold.dim()
            )));
        }
        if scores.ncols() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "scores have {} columns but {} labels given",
                scores.ncols(),
                labels.len()
            )));
        }
        if scores.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("scores must lie in [0, 1]"));
        }
        if gold.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::invalid("gold matrix must be 0/1"));
        }
        Ok(PredictionMatrix {
            scores,
            gold,
            labels,
            space_name: space_name.into(),
            partition,
        })
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    pub fn instance_count(&self) -> usize {
        self.scores.nrows()
    }
}

/// The candidate threshold grid: 0.00 through 1.00 in 0.05 increments.
pub fn threshold_grid() -> [f64; 21] {
    let mut grid = [0.0; 21];
    for (k, slot) in grid.iter_mut().enumerate() {
        *slot = k as f64 / 20.0;
    }
    grid
}

/// Where a threshold vector came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u32>,
}

/// Per-label decision cutoffs selected on validation and applied at test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector {
    /// One grid value per label.
    pub values: Vec<f64>,
    pub provenance: Provenance,
    /// Labels whose validation gold had no positives; their thresholds fall
    /// back to the tie rule and deserve scrutiny.
    pub degenerate: Vec<usize>,
}

impl ThresholdVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// F1 per label under the zero-division convention: a label with an empty
/// denominator (no predicted and no gold positives) scores 0.
pub fn f1_per_label(
    pred: ArrayView2<'_, f64>,
    gold: ArrayView2<'_, f64>,
) -> Result<Vec<f64>> {
    if pred.dim() != gold.dim() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?} vs gold {:?}",
            pred.dim(),
            gold.dim()
        )));
    }
    let mut out = Vec::with_capacity(pred.ncols());
    for j in 0..pred.ncols() {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for i in 0..pred.nrows() {
            let p = pred[(i, j)] != 0.0;
            let g = gold[(i, j)] != 0.0;
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        out.push(if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        });
    }
    Ok(out)
}

/// Unweighted mean of per-label F1 scores.
pub fn macro_f1(per_label: &[f64]) -> Result<f64> {
    if per_label.is_empty() {
        return Err(Error::invalid("macro-F1 of an empty label set"));
    }
    Ok(per_label.iter().sum::<f64>() / per_label.len() as f64)
}

/// Per-label F1 of thresholding column `j` of `scores` at `t`.
fn column_f1(scores: &ArrayView2<'_, f64>, gold: &ArrayView2<'_, f64>, j: usize, t: f64) -> f64 {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for i in 0..scores.nrows() {
        let p = scores[(i, j)] >= t;
        let g = gold[(i, j)] != 0.0;
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Selects, per label, the grid threshold maximizing that label's F1 on the
/// validation matrix (ties to the smallest threshold).
pub fn search_thresholds(val: &PredictionMatrix) -> ThresholdVector {
    let grid = threshold_grid();
    let scores = val.scores.view();
    let gold = val.gold.view();
    let mut values = Vec::with_capacity(val.label_count());
    let mut degenerate = Vec::new();
    for j in 0..val.label_count() {
        if gold.column(j).iter().all(|v| *v == 0.0) {
            degenerate.push(j);
        }
        let mut best_t = grid[0];
        let mut best_f1 = -1.0;
        for &t in &grid {
            let f1 = column_f1(&scores, &gold, j, t);
            if f1 > best_f1 {
                best_f1 = f1;
                best_t = t;
            }
        }
        values.push(best_t);
    }
    ThresholdVector {
        values,
        provenance: Provenance {
            split: val.partition.as_str().to_string(),
            epoch: None,
        },
        degenerate,
    }
}

/// Applies per-label thresholds with the inclusive rule
/// `pred = score >= t_j`.
pub fn binarize(scores: ArrayView2<'_, f64>, thresholds: &ThresholdVector) -> Result<Array2<f64>> {
    if scores.ncols() != thresholds.len() {
        return Err(Error::LengthMismatch {
            expected: scores.ncols(),
            got: thresholds.len(),
        });
    }
    let mut out = Array2::<f64>::zeros(scores.dim());
    for ((i, j), &s) in scores.indexed_iter() {
        if s >= thresholds.values[j] {
            out[(i, j)] = 1.0;
        }
    }
    Ok(out)
}

/// One row of an evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelReport {
    pub name: String,
    pub threshold: f64,
    pub f1: f64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Identifying metadata embedded in every report.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

/// Per-label F1 table plus macro-F1 footer, in label-space order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub per_label: Vec<LabelReport>,
    pub macro_f1: f64,
    pub partition: Partition,
    pub space_name: String,
    pub meta: ReportMeta,
}

impl Report {
    /// Stable plain-text rendering; identical inputs produce identical
    /// bytes.
    pub fn render_text(&self) -> String {
        let name_width = self
            .per_label
            .iter()
            .map(|l| l.name.len())
            .max()
            .unwrap_or(5)
            .max("label".len());
        let mut out = String::new();
        out.push_str(&format!(
            "Per-label F1 ({} / {})\n",
            self.space_name,
            self.partition.as_str()
        ));
        out.push_str(&format!(
            "{:<name_width$}  {:>9}  {:>6}  flags\n",
            "label", "threshold", "F1"
        ));
        out.push_str(&"-".repeat(name_width + 28));
        out.push('\n');
        for row in &self.per_label {
            out.push_str(&format!(
                "{:<name_width$}  {:>9.2}  {:>6.3}  {}\n",
                row.name,
                row.threshold,
                row.f1,
                row.flags.join(",")
            ));
        }
        out.push_str(&"-".repeat(name_width + 28));
        out.push('\n');
        out.push_str(&format!("{:<name_width$}  {:>9}  {:>6.3}\n", "macro-F1", "", self.macro_f1));
        out.push_str(&format!(
            "config: {}  seed: {}  toolkit: {}\n",
            self.meta.config_hash, self.meta.seed, self.meta.version
        ));
        out
    }
}

/// Binarizes the test matrix with the calibrated thresholds and emits the
/// per-label report.
pub fn emit_report(
    test: &PredictionMatrix,
    thresholds: &ThresholdVector,
    meta: ReportMeta,
) -> Result<Report> {
    if test.instance_count() == 0 {
        return Err(Error::invalid("cannot report on an empty matrix"));
    }
    let pred = binarize(test.scores.view(), thresholds)?;
    let mut per_label = Vec::with_capacity(test.label_count());
    let mut f1s = Vec::with_capacity(test.label_count());
    for j in 0..test.label_count() {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for i in 0..test.instance_count() {
            match (pred[(i, j)] != 0.0, test.gold[(i, j)] != 0.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
        let mut flags = Vec::new();
        if thresholds.degenerate.contains(&j) {
            flags.push("no-val-positives".to_string());
        }
        if tp + fn_ == 0 {
            flags.push("no-test-positives".to_string());
        }
        per_label.push(LabelReport {
            name: test.labels[j].clone(),
            threshold: thresholds.values[j],
            f1,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            flags,
        });
        f1s.push(f1);
    }
    Ok(Report {
        macro_f1: macro_f1(&f1s)?,
        per_label,
        partition: test.partition,
        space_name: test.space_name.clone(),
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn matrix(scores: Array2<f64>, gold: Array2<f64>) -> PredictionMatrix {
        let labels = (0..scores.ncols()).map(|j| format!("label-{j}")).collect();
        PredictionMatrix::new(scores, gold, labels, "test-space", Partition::Val).unwrap()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gold = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let f1 = f1_per_label(gold.view(), gold.view()).unwrap();
        assert_eq!(f1, vec![1.0, 1.0]);
    }

    #[test]
    fn all_zero_predictions_score_zero_when_gold_has_positives() {
        let pred = Array2::zeros((3, 2));
        let gold = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let f1 = f1_per_label(pred.view(), gold.view()).unwrap();
        assert_eq!(f1, vec![0.0, 0.0]);
    }

    #[test]
    fn one_tp_one_fp_gives_two_thirds() {
        let pred = array![[1.0], [1.0]];
        let gold = array![[1.0], [0.0]];
        let f1 = f1_per_label(pred.view(), gold.view()).unwrap();
        assert_relative_eq!(f1[0], 2.0 / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn zero_division_convention_gives_zero() {
        let pred = Array2::zeros((4, 1));
        let gold = Array2::zeros((4, 1));
        assert_eq!(f1_per_label(pred.view(), gold.view()).unwrap(), vec![0.0]);
    }

    #[test]
    fn macro_f1_basics() {
        assert_relative_eq!(macro_f1(&[1.0, 0.0]).unwrap(), 0.5);
        assert_relative_eq!(macro_f1(&[0.37, 0.37, 0.37]).unwrap(), 0.37);
        assert!(macro_f1(&[]).is_err());
    }

    #[test]
    fn nineteen_label_average_reproduces_reported_macro() {
        // Best per-label column of the reference transcript results.
        let f1 = [
            0.625, 0.654, 0.322, 0.459, 0.586, 0.387, 0.453, 0.556, 0.340, 0.740,
            0.115, 0.480, 0.235, 0.505, 0.526, 0.200, 0.635, 0.572, 0.344,
        ];
        let m = macro_f1(&f1).unwrap();
        assert!((m - 0.460).abs() < 5e-4, "macro {m} should round to 0.460");
    }

    #[test]
    fn threshold_search_picks_smallest_grid_value_with_max_f1() {
        let m = matrix(array![[0.2], [0.6], [0.8]], array![[0.0], [1.0], [1.0]]);
        let tv = search_thresholds(&m);
        assert_relative_eq!(tv.values[0], 0.25);
        assert!(tv.degenerate.is_empty());
    }

    #[test]
    fn degenerate_label_falls_back_to_zero_threshold_and_is_flagged() {
        let m = matrix(array![[0.2], [0.7]], array![[0.0], [0.0]]);
        let tv = search_thresholds(&m);
        assert_eq!(tv.values[0], 0.0);
        assert_eq!(tv.degenerate, vec![0]);
    }

    #[test]
    fn search_is_deterministic() {
        let m = matrix(
            array![[0.1, 0.9], [0.4, 0.2], [0.8, 0.55]],
            array![[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]],
        );
        assert_eq!(search_thresholds(&m), search_thresholds(&m));
    }

    #[test]
    fn grid_has_21_values_including_endpoints() {
        let grid = threshold_grid();
        assert_eq!(grid.len(), 21);
        assert_eq!(grid[0], 0.0);
        assert_eq!(grid[20], 1.0);
        assert_relative_eq!(grid[5], 0.25);
    }

    #[test]
    fn binarize_respects_inclusive_rule_and_endpoints() {
        let tv = ThresholdVector {
            values: vec![0.0, 1.0, 0.5],
            provenance: Provenance { split: "val".into(), epoch: None },
            degenerate: vec![],
        };
        let scores = array![[0.0, 0.99, 0.5], [0.7, 1.0, 0.49]];
        let pred = binarize(scores.view(), &tv).unwrap();
        // t = 0 -> all ones; t = 1 -> only exact 1.0; score == t -> positive.
        assert_eq!(pred, array![[1.0, 0.0, 1.0], [1.0, 1.0, 0.0]]);
    }

    #[test]
    fn binarize_rejects_length_mismatch() {
        let tv = ThresholdVector {
            values: vec![0.5],
            provenance: Provenance { split: "val".into(), epoch: None },
            degenerate: vec![],
        };
        assert!(binarize(array![[0.1, 0.2]].view(), &tv).is_err());
    }

    #[test]
    fn raising_threshold_never_raises_fp_or_lowers_fn() {
        let scores = array![[0.1], [0.3], [0.55], [0.7], [0.95]];
        let gold = array![[0.0], [1.0], [0.0], [1.0], [1.0]];
        let mut prev_fp = u64::MAX;
        let mut prev_fn = 0u64;
        for &t in &threshold_grid() {
            let mut fp = 0;
            let mut fn_ = 0;
            for i in 0..scores.nrows() {
                match (scores[(i, 0)] >= t, gold[(i, 0)] != 0.0) {
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            assert!(fp <= prev_fp);
            assert!(fn_ >= prev_fn);
            prev_fp = fp;
            prev_fn = fn_;
        }
    }

    #[test]
    fn report_is_deterministic_and_carries_footer() {
        let scores = array![[0.9, 0.1], [0.2, 0.8], [0.7, 0.6]];
        let gold = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let labels = vec!["Alpha".to_string(), "Beta".to_string()];
        let m = PredictionMatrix::new(scores, gold, labels, "demo", Partition::Test).unwrap();
        let tv = ThresholdVector {
            values: vec![0.5, 0.5],
            provenance: Provenance { split: "val".into(), epoch: Some(3) },
            degenerate: vec![],
        };
        let meta = ReportMeta {
            config_hash: "abc123".into(),
            seed: 7,
            version: "0.1.0".into(),
        };
        let a = emit_report(&m, &tv, meta.clone()).unwrap();
        let b = emit_report(&m, &tv, meta).unwrap();
        assert_eq!(a.render_text(), b.render_text());
        let text = a.render_text();
        assert!(text.contains("Alpha"));
        assert!(text.contains("macro-F1"));
        assert!(text.contains("config: abc123"));
        assert_relative_eq!(a.macro_f1, 1.0);
    }

    #[test]
    fn perfect_report_is_all_ones() {
        let gold = array![[1.0, 0.0], [0.0, 1.0]];
        let m = PredictionMatrix::new(
            gold.clone(),
            gold,
            vec!["A".into(), "B".into()],
            "demo",
            Partition::Test,
        )
        .unwrap();
        let tv = ThresholdVector {
            values: vec![0.5, 0.5],
            provenance: Provenance { split: "val".into(), epoch: None },
            degenerate: vec![],
        };
        let report = emit_report(&m, &tv, ReportMeta::default()).unwrap();
        assert!(report.per_label.iter().all(|l| l.f1 == 1.0));
        assert_eq!(report.macro_f1, 1.0);
    }
}
