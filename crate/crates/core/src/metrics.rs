//! Ranking and regression metrics for cost-model evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub r2: f64,
    pub pairwise_accuracy: f64,
    pub recall_at_k: f64,
    pub k: usize,
}

pub fn rmse(pred: &[f64], y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let se: f64 = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum();
    (se / y.len() as f64).sqrt()
}

/// Coefficient of determination. A constant target gives 1 for a perfect
/// fit and 0 otherwise.
pub fn r2(pred: &[f64], y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// Share of pairs with distinct targets whose predicted order agrees;
/// tied predictions score one half. With no such pair the answer is 1.
pub fn pairwise_accuracy(pred: &[f64], y: &[f64]) -> f64 {
    let mut pairs = 0u64;
    let mut score = 0.0;
    for i in 0..y.len() {
        for j in i + 1..y.len() {
            if y[i] == y[j] {
                continue;
            }
            pairs += 1;
            if pred[i] == pred[j] {
                score += 0.5;
            } else if (pred[i] < pred[j]) == (y[i] < y[j]) {
                score += 1.0;
            }
        }
    }
    if pairs == 0 {
        1.0
    } else {
        score / pairs as f64
    }
}

/// Indices of the k largest values; ties go to the lower index.
pub fn top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*b].total_cmp(&v[*a]).then(a.cmp(b)));
    idx.truncate(k);
    idx
}

pub fn recall_at_k(pred: &[f64], y: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > y.len() {
        return Err(Error::Contract(format!("recall@{k} needs 1 ≤ k ≤ {}", y.len())));
    }
    let g = top_k(y, k);
    let p = top_k(pred, k);
    Ok(g.iter().filter(|i| p.contains(i)).count() as f64 / k as f64)
}

pub fn evaluate(pred: &[f64], y: &[f64], k: usize) -> Result<Metrics> {
    if y.is_empty() || pred.len() != y.len() {
        return Err(Error::Contract("metrics need equally sized, nonempty inputs".into()));
    }
    Ok(Metrics {
        rmse: rmse(pred, y),
        r2: r2(pred, y),
        pairwise_accuracy: pairwise_accuracy(pred, y),
        recall_at_k: recall_at_k(pred, y, k)?,
        k,
    })
}
