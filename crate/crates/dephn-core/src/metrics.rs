//! Binary classification metrics: logloss, rank-based AUC, and Pearson
//! correlation.

use crate::error::{Error, Result};

/// Probabilities are clamped into this open interval before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean negative log-likelihood of binary labels under predicted
/// probabilities.
pub fn logloss(predictions: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    assert!(!predictions.is_empty());
    let mut sum = 0.0;
    for (&p, &y) in predictions.iter().zip(labels) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        sum += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    sum / predictions.len() as f64
}

/// Area under the ROC curve via the rank statistic: the probability that a
/// random positive outranks a random negative, ties counted one-half.
/// Requires at least one positive and one negative label.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric(format!(
            "auc undefined for single-class labels ({positives} positive, {negatives} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("non-finite score"));

    // Average ranks over tied score groups; tied-rank midpoints are exact
    // halves, so the pair-counting identity holds in f64 exactly.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] > 0.5 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    if a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return None;
    }
    Some(cov / (var_a.sqrt() * var_b.sqrt()))
}
