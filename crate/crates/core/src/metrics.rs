//! Pooled binary-prediction metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const F1_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("AUC undefined: all {n} labels are {label}")]
    SingleClass { n: usize, label: u8 },
    #[error("no predictions")]
    Empty,
    #[error("{scores} scores for {labels} labels")]
    Length { scores: usize, labels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub f1: f64,
    pub rmse: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Canonical (score, label) order so every pooled statistic is independent
/// of the order predictions were produced in.
fn canonical(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, u8)>, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().map(|&l| u8::from(l != 0))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(pairs)
}

/// Rank-statistic AUC with average ranks for tied scores.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    auc_sorted(&canonical(scores, labels)?)
}

fn auc_sorted(pairs: &[(f64, u8)]) -> Result<f64, MetricsError> {
    let n = pairs.len();
    let pos = pairs.iter().filter(|p| p.1 == 1).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass { n, label: pairs[0].1 });
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pairs[j + 1].0 == pairs[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * pairs[i..=j].iter().filter(|p| p.1 == 1).count() as f64;
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

pub fn compute_metrics(scores: &[f64], labels: &[u8]) -> Result<Metrics, MetricsError> {
    let pairs = canonical(scores, labels)?;
    let auc = auc_sorted(&pairs)?;
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    let mut sse = 0.0;
    for &(s, l) in &pairs {
        let predicted = s >= F1_THRESHOLD;
        match (predicted, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        if predicted == (l == 1) {
            correct += 1;
        }
        sse += (s - l as f64).powi(2);
    }
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    let n = pairs.len();
    Ok(Metrics { auc, f1, rmse: (sse / n as f64).sqrt(), accuracy: correct as f64 / n as f64, count: n })
}
