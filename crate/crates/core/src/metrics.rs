//! Classification metrics: confusion matrix, per-class precision/recall/F1,
//! and unweighted macro averages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attnclf::{Classifier, ForwardMode, Prediction};
use crate::error::{Error, Result};
use crate::loader::LoadedSplit;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    /// Rows are true classes, columns predictions, ordered like `classes`.
    pub confusion: Vec<Vec<usize>>,
    pub classes: Vec<String>,
    pub total: usize,
    /// Classes where a zero denominator forced precision/recall/F1 to 0.
    pub zero_division_classes: Vec<String>,
}

/// Build the full report from a confusion matrix. Macro metrics are the
/// unweighted mean over classes; zero denominators yield 0 and get flagged.
pub fn report_from_confusion(classes: &[String], confusion: Vec<Vec<usize>>) -> MetricsReport {
    let c = classes.len();
    assert_eq!(confusion.len(), c);
    let total: usize = confusion.iter().map(|row| row.iter().sum::<usize>()).sum();
    let trace: usize = (0..c).map(|i| confusion[i][i]).sum();

    let mut per_class = BTreeMap::new();
    let mut zero_division = Vec::new();
    let (mut mp, mut mr, mut mf) = (0.0, 0.0, 0.0);
    for (i, class) in classes.iter().enumerate() {
        let tp = confusion[i][i];
        let row_sum: usize = confusion[i].iter().sum();
        let col_sum: usize = (0..c).map(|r| confusion[r][i]).sum();
        let mut flagged = false;
        let precision = if col_sum == 0 {
            flagged = true;
            0.0
        } else {
            tp as f64 / col_sum as f64
        };
        let recall = if row_sum == 0 {
            flagged = true;
            0.0
        } else {
            tp as f64 / row_sum as f64
        };
        let f1 = if precision + recall == 0.0 {
            flagged = flagged || true;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        if flagged {
            zero_division.push(class.clone());
        }
        mp += precision;
        mr += recall;
        mf += f1;
        per_class.insert(class.clone(), ClassMetrics { precision, recall, f1, support: row_sum });
    }
    MetricsReport {
        accuracy: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
        macro_precision: mp / c as f64,
        macro_recall: mr / c as f64,
        macro_f1: mf / c as f64,
        per_class,
        confusion,
        classes: classes.to_vec(),
        total,
        zero_division_classes: zero_division,
    }
}

/// Batched predictions over a split, eval mode.
pub fn predict_split(clf: &Classifier, split: &LoadedSplit, batch: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for idxs in split.batch_indices(batch) {
        let (images, labels) = split.batch(&idxs)?;
        let (pred, _) = clf.forward(&images, &mut ForwardMode::Eval)?;
        out.push(Prediction { labels, ..pred });
    }
    Ok(out)
}

/// Evaluate a model on a split: deterministic, eval mode, macro averaging.
pub fn evaluate(clf: &Classifier, split: &LoadedSplit, batch: usize) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::Evaluation("cannot evaluate an empty split".into()));
    }
    let c = split.classes.len();
    let mut confusion = vec![vec![0usize; c]; c];
    for pred in predict_split(clf, split, batch)? {
        for (&truth, guess) in pred.labels.iter().zip(pred.argmax()) {
            confusion[truth][guess] += 1;
        }
    }
    Ok(report_from_confusion(&split.classes, confusion))
}

/// Plain accuracy, used as the search objective and epoch tracker.
pub fn accuracy(clf: &Classifier, split: &LoadedSplit, batch: usize) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Evaluation("cannot evaluate an empty split".into()));
    }
    let mut correct = 0usize;
    for pred in predict_split(clf, split, batch)? {
        correct += pred
            .labels
            .iter()
            .zip(pred.argmax())
            .filter(|(&t, g)| t == *g)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn classes(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_predictions() {
        let r = report_from_confusion(&classes(3), vec![vec![5, 0, 0], vec![0, 2, 0], vec![0, 0, 3]]);
        assert_abs_diff_eq!(r.accuracy, 1.0);
        assert_abs_diff_eq!(r.macro_f1, 1.0);
        assert!(r.zero_division_classes.is_empty());
    }

    #[test]
    fn hand_confusion_oracle() {
        // [[2,0],[1,1]]: acc 0.75, c0 precision 2/3 recall 1, c1 precision 1
        // recall 0.5, macro f1 = (0.8 + 2/3)/2
        let r = report_from_confusion(&classes(2), vec![vec![2, 0], vec![1, 1]]);
        assert_abs_diff_eq!(r.accuracy, 0.75);
        let c0 = r.per_class["c0"];
        let c1 = r.per_class["c1"];
        assert_abs_diff_eq!(c0.precision, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c0.recall, 1.0);
        assert_abs_diff_eq!(c1.precision, 1.0);
        assert_abs_diff_eq!(c1.recall, 0.5);
        assert_abs_diff_eq!(r.macro_f1, (0.8 + 2.0 / 3.0) / 2.0, epsilon = 1e-4);
        assert_abs_diff_eq!(r.macro_f1, 0.7333, epsilon = 1e-4);
    }

    #[test]
    fn constant_predictor_degenerate_recall() {
        // everything predicted as class 0
        let r = report_from_confusion(&classes(2), vec![vec![4, 0], vec![6, 0]]);
        assert_abs_diff_eq!(r.per_class["c0"].recall, 1.0);
        assert_abs_diff_eq!(r.per_class["c1"].recall, 0.0);
        assert!(r.zero_division_classes.contains(&"c1".to_string()));
    }

    #[test]
    fn macro_equals_mean_of_per_class() {
        let r = report_from_confusion(
            &classes(3),
            vec![vec![3, 1, 0], vec![0, 2, 2], vec![1, 0, 5]],
        );
        let mean_p: f64 = r.per_class.values().map(|m| m.precision).sum::<f64>() / 3.0;
        let mean_r: f64 = r.per_class.values().map(|m| m.recall).sum::<f64>() / 3.0;
        let mean_f: f64 = r.per_class.values().map(|m| m.f1).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(r.macro_precision, mean_p, epsilon = 1e-12);
        assert_abs_diff_eq!(r.macro_recall, mean_r, epsilon = 1e-12);
        assert_abs_diff_eq!(r.macro_f1, mean_f, epsilon = 1e-12);
        let total: usize = r.confusion.iter().flatten().sum();
        assert_eq!(total, r.total);
    }
}
