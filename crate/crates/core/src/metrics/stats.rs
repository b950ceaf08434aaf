//! Rank correlation with a two-sided t-approximation p-value.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::MetricsError;
use crate::domain::EvaluationRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.is_empty() {
        return Err(MetricsError::Empty);
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
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Correlation, MetricsError> {
    if xs.len() < 3 {
        return Err(MetricsError::TooFewRecords {
            records: xs.len(),
            bins: 3,
        });
    }
    let rho = pearson(&average_ranks(xs), &average_ranks(ys))?;
    let n = xs.len();
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| MetricsError::Invalid("degrees of freedom", e.to_string()))?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Correlation { rho, p_value, n })
}

/// Record-level Spearman correlation between consistency and soft accuracy.
pub fn consistency_accuracy_correlation(
    records: &[EvaluationRecord],
) -> Result<Correlation, MetricsError> {
    let mut xs = Vec::with_capacity(records.len());
    let mut ys = Vec::with_capacity(records.len());
    for r in records {
        let c = r
            .consistency
            .as_ref()
            .ok_or_else(|| MetricsError::MissingConsistency(r.instance_id.clone()))?;
        xs.push(c.consistency);
        ys.push(r.soft_score.value());
    }
    spearman(&xs, &ys)
}
