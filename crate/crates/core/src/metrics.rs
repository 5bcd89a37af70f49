//! Loss and accuracy metrics for binary and scored predictions.

use crate::error::{KtError, Result};
use crate::numerics::bce_sum;

/// Probability that a random positive scores above a random negative, with
/// ties counted one half. Computed from midranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(KtError::shape("auc", &[scores.len()], &[labels.len()]));
    }
    let positives = labels.iter().filter(|&&l| l == 1.0).count();
    let negatives = labels.iter().filter(|&&l| l == 0.0).count();
    if positives + negatives != labels.len() {
        return Err(KtError::Range("auc labels must be 0 or 1".into()));
    }
    if positives == 0 || negatives == 0 {
        return Err(KtError::UndefinedAuc("auc needs both classes"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(KtError::NonFinite { op: "auc".into() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based midranks of the positives, kept doubled so it stays integral.
    let mut doubled_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let doubled_mid = (start + 1 + end) as u64;
        let pos_in_group = order[start..end]
            .iter()
            .filter(|&&i| labels[i] == 1.0)
            .count() as u64;
        doubled_rank_sum += doubled_mid * pos_in_group;
        start = end;
    }
    let p = positives as u64;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// Metrics of probabilities against `{0, 1}` labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub bce: f64,
    pub rmse: f64,
    pub mae: f64,
    pub acc: f64,
}

fn check_aligned(a: &[f64], b: &[f64], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(KtError::shape(op, &[a.len()], &[b.len()]));
    }
    if a.is_empty() {
        return Err(KtError::Contract(format!("{op} of zero predictions")));
    }
    Ok(())
}

fn errors(preds: &[f64], targets: &[f64]) -> (f64, f64) {
    let (sq, abs) = preds
        .iter()
        .zip(targets)
        .fold((0.0, 0.0), |(s, a), (&p, &t)| {
            (s + (p - t) * (p - t), a + (p - t).abs())
        });
    let n = preds.len() as f64;
    (sq / n, abs / n)
}

pub fn classification_metrics(
    probs: &[f64],
    labels: &[f64],
    threshold: f64,
) -> Result<ClassificationMetrics> {
    check_aligned(probs, labels, "classification_metrics")?;
    let n = probs.len() as f64;
    let (mse, mae) = errors(probs, labels);
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|&(&p, &l)| (p >= threshold) == (l == 1.0))
        .count();
    Ok(ClassificationMetrics {
        bce: bce_sum(probs, labels) / n,
        rmse: mse.sqrt(),
        mae,
        acc: hits as f64 / n,
    })
}

/// Metrics of normalized score predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionMetrics {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub acc: f64,
}

/// Nearest of `levels` evenly spaced score levels on `[0, 1]`.
pub fn nearest_level(value: f64, levels: usize) -> usize {
    let top = (levels.max(2) - 1) as f64;
    (value.clamp(0.0, 1.0) * top).round() as usize
}

/// `levels[k]` is the score level count of prediction `k`'s skill. Accuracy
/// counts predictions that round to the same level as their target.
pub fn regression_metrics(
    preds: &[f64],
    targets: &[f64],
    levels: &[usize],
) -> Result<RegressionMetrics> {
    check_aligned(preds, targets, "regression_metrics")?;
    if levels.len() != preds.len() {
        return Err(KtError::shape(
            "regression_metrics",
            &[preds.len()],
            &[levels.len()],
        ));
    }
    let (mse, mae) = errors(preds, targets);
    let hits = (0..preds.len())
        .filter(|&k| nearest_level(preds[k], levels[k]) == nearest_level(targets[k], levels[k]))
        .count();
    Ok(RegressionMetrics {
        mse,
        rmse: mse.sqrt(),
        mae,
        acc: hits as f64 / preds.len() as f64,
    })
}

/// Brute-force pairwise AUC used as a test oracle.
pub fn pairwise_auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1.0 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0.0 {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}
