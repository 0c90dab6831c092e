//! Average precision, recall curves, Pearson correlation and the summary
//! statistics reported per strategy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{Label, LabeledSet};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no positive examples")]
    NoPositives,
    #[error("need at least {needed} shared concepts, have {have}")]
    TooFewConcepts { needed: usize, have: usize },
    #[error("zero variance")]
    ZeroVariance,
}

/// Mean over positives of the precision at each positive's rank. Ranks sort
/// by descending score; equal scores keep input order.
pub fn average_precision(scores: &[f64], labels: &[Label]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let total = labels.iter().filter(|l| l.is_positive()).count();
    if total == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i].is_positive() {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

/// `(labels_spent, recall)` after every labeling step, in labeling order.
pub fn recall_curve(labeled: &LabeledSet, total_positives: usize) -> Vec<(usize, f64)> {
    let total = total_positives.max(1) as f64;
    let mut found = 0usize;
    labeled
        .entries()
        .iter()
        .enumerate()
        .map(|(i, (_, l))| {
            if l.is_positive() {
                found += 1;
            }
            (i + 1, found as f64 / total)
        })
        .collect()
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch {
            scores: xs.len(),
            labels: ys.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Pearson r over the concepts present in both maps.
pub fn per_concept_correlation(ap_a: &BTreeMap<String, f64>, ap_b: &BTreeMap<String, f64>) -> Result<f64, MetricsError> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = ap_a
        .iter()
        .filter_map(|(k, a)| ap_b.get(k).map(|b| (*a, *b)))
        .unzip();
    if xs.len() < 3 {
        return Err(MetricsError::TooFewConcepts {
            needed: 3,
            have: xs.len(),
        });
    }
    pearson(&xs, &ys)
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row of the summary report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    #[serde(rename = "mAP_mean")]
    pub map_mean: f64,
    #[serde(rename = "mAP_std")]
    pub map_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub pool_frac_mean: f64,
}
