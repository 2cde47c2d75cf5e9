//! Classification metrics: confusion matrix, accuracy, macro-F1, and
//! one-vs-rest macro-AUC via the rank statistic with tie correction.

use crate::error::{Error, Result};
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct PerClass {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// None when fewer than two classes are present in the labels.
    pub macro_auc: Option<f64>,
    pub per_class: Vec<PerClass>,
    pub confusion: Vec<Vec<usize>>,
    /// Set when some class had zero support or zero predictions (its F1
    /// enters the macro average as 0).
    pub degenerate_f1: bool,
}

/// confusion[true][pred]
pub fn confusion_matrix(labels: &[usize], preds: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if labels.len() != preds.len() {
        return Err(Error::Input(format!(
            "labels ({}) and predictions ({}) differ in length",
            labels.len(),
            preds.len()
        )));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&y, &p) in labels.iter().zip(preds) {
        if y >= classes || p >= classes {
            return Err(Error::Input(format!("label/prediction ({y}, {p}) out of range {classes}")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// One-vs-rest AUC for class `c` from per-sample scores, using the
/// Mann-Whitney rank statistic with midranks for ties. None when the split
/// has no positives or no negatives.
pub fn auc_one_vs_rest(labels: &[usize], scores: &[f64], c: usize) -> Option<f64> {
    let n = labels.len();
    assert_eq!(n, scores.len());
    let pos = labels.iter().filter(|&&y| y == c).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // midrank for the tie group [i, j] (1-based ranks)
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == c {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// Full metric set from hard predictions plus per-class probability scores.
/// `scores[i][c]` is sample i's score for class c (used only for AUC; pass
/// softmax probabilities).
pub fn compute_metrics(
    labels: &[usize],
    preds: &[usize],
    scores: &[Vec<f64>],
    classes: usize,
) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::Input("empty evaluation split".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Input("scores length mismatch".into()));
    }
    let confusion = confusion_matrix(labels, preds, classes)?;
    let n = labels.len();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / n as f64;

    let mut per_class = Vec::with_capacity(classes);
    let mut degenerate_f1 = false;
    for c in 0..classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..classes).map(|y| confusion[y][c]).sum();
        let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            degenerate_f1 = true;
            0.0
        };
        let class_scores: Vec<f64> = scores
            .iter()
            .map(|row| row.get(c).copied().unwrap_or(f64::NEG_INFINITY))
            .collect();
        let auc = auc_one_vs_rest(labels, &class_scores, c);
        per_class.push(PerClass { precision, recall, f1, support, auc });
    }
    let macro_f1 = per_class.iter().map(|p| p.f1).sum::<f64>() / classes as f64;
    let aucs: Vec<f64> = per_class.iter().filter_map(|p| p.auc).collect();
    let macro_auc = if aucs.len() >= 2 {
        Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
    } else {
        None
    };
    Ok(Metrics { accuracy, macro_f1, macro_auc, per_class, confusion, degenerate_f1 })
}
