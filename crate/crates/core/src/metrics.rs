//! Classification metrics: accuracy, ranking AUC (midrank Mann-Whitney),
//! and F1, with macro averaging for more than two classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class diagnostic row of an evaluation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassBreakdown {
    pub class: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Evaluation summary for one classifier on one test set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
    pub per_class: Vec<ClassBreakdown>,
    pub n_test: usize,
    pub seeds: Vec<u64>,
}

fn check_nonempty(n: usize, op: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::contract(format!("{op}: empty input")));
    }
    Ok(())
}

/// Fraction of positions where prediction equals label.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    check_nonempty(labels.len(), "accuracy")?;
    if pred.len() != labels.len() {
        return Err(Error::contract(format!(
            "accuracy: {} predictions vs {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Binary ranking AUC via the Mann-Whitney statistic with midranks for ties.
/// Equals the probability that a random positive outranks a random negative,
/// counting ties as half.
pub fn auc_binary(scores: &[f32], labels: &[bool]) -> Result<f64> {
    check_nonempty(labels.len(), "auc")?;
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::contract("auc: class 1 absent from labels"));
    }
    if n_neg == 0 {
        return Err(Error::contract("auc: class 0 absent from labels"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Midranks: every member of a tie group gets the mean of the ranks the
    // group spans (1-based).
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest macro AUC over `n_classes` score columns.
pub fn auc_macro_ovr(scores: &[Vec<f32>], labels: &[usize], n_classes: usize) -> Result<f64> {
    check_nonempty(labels.len(), "auc")?;
    if n_classes < 2 {
        return Err(Error::contract("auc: need at least 2 classes"));
    }
    let mut total = 0.0f64;
    for c in 0..n_classes {
        if !labels.contains(&c) {
            return Err(Error::contract(format!("auc: class {c} absent from labels")));
        }
        let col: Vec<f32> = scores
            .iter()
            .map(|row| {
                row.get(c).copied().ok_or_else(|| {
                    Error::contract(format!("auc: score row shorter than {n_classes} classes"))
                })
            })
            .collect::<Result<_>>()?;
        let bin: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += auc_binary(&col, &bin)?;
    }
    Ok(total / n_classes as f64)
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    (precision, recall, f1)
}

/// Per-class precision/recall/F1 rows for classes `0..n_classes`.
pub fn per_class_breakdown(
    pred: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<Vec<ClassBreakdown>> {
    check_nonempty(labels.len(), "f1")?;
    if pred.len() != labels.len() {
        return Err(Error::contract(format!(
            "f1: {} predictions vs {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let mut rows = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let tp = pred
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == c && l == c)
            .count();
        let fp = pred
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == c && l != c)
            .count();
        let fn_ = pred
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p != c && l == c)
            .count();
        let (precision, recall, f1) = prf(tp, fp, fn_);
        rows.push(ClassBreakdown {
            class: c,
            support: labels.iter().filter(|&&l| l == c).count(),
            precision,
            recall,
            f1,
        });
    }
    Ok(rows)
}

/// Positive-class F1 for two classes (class 1 positive), macro-F1 otherwise.
pub fn f1_score(pred: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let rows = per_class_breakdown(pred, labels, n_classes)?;
    if n_classes == 2 {
        Ok(rows[1].f1)
    } else {
        Ok(rows.iter().map(|r| r.f1).sum::<f64>() / n_classes as f64)
    }
}
