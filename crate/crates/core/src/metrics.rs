//! Classification metrics: accuracy, confusion counts, and macro
//! one-vs-rest AUC from the trapezoidal ROC curve.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Macro one-vs-rest AUC; absent when no class has both positives
    /// and negatives in the evaluation set.
    pub auc: Option<f64>,
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<u64>>,
}

/// Argmax with ties resolved to the lowest class index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// AUC of one class against the rest, by trapezoidal integration of the
/// ROC curve with tied scores collapsed into single sweep steps. The
/// rank formulation makes the value invariant under strictly monotone
/// score transforms.
pub fn binary_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let pos = positives.iter().filter(|&&p| p).count();
    let neg = positives.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut area = 0.0f64;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        let mut d_tp = 0u64;
        let mut d_fp = 0u64;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positives[order[j]] {
                d_tp += 1;
            } else {
                d_fp += 1;
            }
            j += 1;
        }
        // trapezoid over the tie group
        area += d_fp as f64 * (tp as f64 + d_tp as f64 / 2.0);
        tp += d_tp;
        fp += d_fp;
        i = j;
    }
    let _ = fp;
    Some(area / (pos as f64 * neg as f64))
}

/// Evaluates per-sample class scores against integer labels.
pub fn evaluate_predictions(
    y_true: &[usize],
    scores: &[Vec<f64>],
    num_classes: usize,
) -> Result<Metrics> {
    if y_true.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels vs {} score rows",
            y_true.len(),
            scores.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Degenerate("empty evaluation set".into()));
    }
    if scores.iter().any(|s| s.len() != num_classes) {
        return Err(Error::ShapeMismatch("score row width vs class count".into()));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&t, s) in y_true.iter().zip(scores) {
        if t >= num_classes {
            return Err(Error::ShapeMismatch(format!("label {t} out of range")));
        }
        confusion[t][argmax(s)] += 1;
    }
    let trace: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
    let accuracy = trace as f64 / y_true.len() as f64;

    let mut aucs = Vec::new();
    for c in 0..num_classes {
        let class_scores: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let positives: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
        if let Some(a) = binary_auc(&class_scores, &positives) {
            aucs.push(a);
        }
    }
    let auc = if aucs.is_empty() {
        None
    } else {
        Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
    };
    Ok(Metrics { accuracy, auc, confusion })
}

/// Mean and population standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions_score_one() {
        let y = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let scores: Vec<Vec<f64>> = y
            .iter()
            .map(|&c| {
                let mut s = vec![0.05; 4];
                s[c] = 0.85;
                s
            })
            .collect();
        let m = evaluate_predictions(&y, &scores, 4).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.auc, Some(1.0));
        let trace: u64 = (0..4).map(|c| m.confusion[c][c]).sum();
        assert_eq!(trace, 8);
    }

    #[test]
    fn known_binary_auc_value() {
        // classic four-point example with one inversion
        let scores = vec![0.1, 0.4, 0.35, 0.8];
        let pos = vec![false, false, true, true];
        let auc = binary_auc(&scores, &pos).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ties_are_averaged() {
        let scores = vec![0.5, 0.5, 0.5, 0.5];
        let pos = vec![true, false, true, false];
        assert!((binary_auc(&scores, &pos).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn random_scores_hover_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4000;
        let y: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let scores: Vec<Vec<f64>> =
            (0..n).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let m = evaluate_predictions(&y, &scores, 4).unwrap();
        let auc = m.auc.unwrap();
        assert!((auc - 0.5).abs() < 0.05, "auc {auc}");
        assert!((m.accuracy - 0.25).abs() < 0.05);
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scores: Vec<f64> = (0..200).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let pos: Vec<bool> = (0..200).map(|_| rng.random::<f64>() < 0.4).collect();
        let base = binary_auc(&scores, &pos).unwrap();
        let exp: Vec<f64> = scores.iter().map(|v| v.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|v| 3.0 * v + 10.0).collect();
        assert!((binary_auc(&exp, &pos).unwrap() - base).abs() < 1e-12);
        assert!((binary_auc(&affine, &pos).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn single_class_test_part_reports_absent_auc() {
        let y = vec![1, 1, 1];
        let scores = vec![vec![0.2, 0.8], vec![0.3, 0.7], vec![0.6, 0.4]];
        let m = evaluate_predictions(&y, &scores, 2).unwrap();
        assert_eq!(m.auc, None);
        assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_equals_confusion_trace_ratio() {
        let y = vec![0, 0, 1, 1, 2, 2];
        let scores = vec![
            vec![0.9, 0.05, 0.05],
            vec![0.1, 0.8, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.1, 0.1, 0.8],
            vec![0.8, 0.1, 0.1],
        ];
        let m = evaluate_predictions(&y, &scores, 3).unwrap();
        let total: u64 = m.confusion.iter().flatten().sum();
        let trace: u64 = (0..3).map(|c| m.confusion[c][c]).sum();
        assert_eq!(total, 6);
        assert!((m.accuracy - trace as f64 / total as f64).abs() < 1e-15);
    }
}
