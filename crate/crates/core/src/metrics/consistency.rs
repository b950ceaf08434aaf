use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::domain::{ConsistencyResult, EvaluationRecord};

fn consistency_of(r: &EvaluationRecord, k: u32) -> Result<&ConsistencyResult, MetricsError> {
    let c = r
        .consistency
        .as_ref()
        .ok_or_else(|| MetricsError::MissingConsistency(r.instance_id.clone()))?;
    if c.k != k {
        return Err(MetricsError::MixedK {
            expected: k,
            found: c.k,
            instance_id: r.instance_id.clone(),
        });
    }
    Ok(c)
}

/// The common `k` of a record set; fails on missing or mixed values.
pub fn consistency_k(records: &[EvaluationRecord]) -> Result<u32, MetricsError> {
    let first = records.first().ok_or(MetricsError::Empty)?;
    let k = first
        .consistency
        .as_ref()
        .ok_or_else(|| MetricsError::MissingConsistency(first.instance_id.clone()))?
        .k;
    for r in records {
        consistency_of(r, k)?;
    }
    Ok(k)
}

/// Nested slices: `slices[j]` holds every record with `agree_count >= j`,
/// for `j = 0..=k`. Input order is preserved inside each slice.
pub fn stratify_by_consistency(
    records: &[EvaluationRecord],
    k: u32,
) -> Result<Vec<Vec<&EvaluationRecord>>, MetricsError> {
    let mut slices: Vec<Vec<&EvaluationRecord>> = vec![Vec::new(); k as usize + 1];
    for r in records {
        let agree = consistency_of(r, k)?.agree_count;
        for slice in slices.iter_mut().take(agree as usize + 1) {
            slice.push(r);
        }
    }
    Ok(slices)
}

fn counts_by_level(records: &[EvaluationRecord], k: u32) -> Result<Vec<Vec<&EvaluationRecord>>, MetricsError> {
    let mut levels: Vec<Vec<&EvaluationRecord>> = vec![Vec::new(); k as usize + 1];
    for r in records {
        levels[consistency_of(r, k)?.agree_count as usize].push(r);
    }
    Ok(levels)
}

/// Fraction of records at each exact agreement level `0..=k`.
pub fn consistency_histogram(records: &[EvaluationRecord], k: u32) -> Result<Vec<f64>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = records.len() as f64;
    Ok(counts_by_level(records, k)?
        .iter()
        .map(|l| l.len() as f64 / n)
        .collect())
}

/// Mean soft accuracy at each exact agreement level; `None` where a level is empty.
pub fn accuracy_by_consistency(
    records: &[EvaluationRecord],
    k: u32,
) -> Result<Vec<Option<f64>>, MetricsError> {
    Ok(counts_by_level(records, k)?
        .iter()
        .map(|level| {
            (!level.is_empty()).then(|| {
                let thirds: u64 = level.iter().map(|r| u64::from(r.soft_score.thirds())).sum();
                thirds as f64 / (3 * level.len()) as f64
            })
        })
        .collect())
}

/// Confidence histograms per exact agreement level.
///
/// Bins are `[e_i, e_{i+1})` with the last bin closed; confidences outside
/// `[e_0, e_last]` are not counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceDistribution {
    pub bin_edges: Vec<f64>,
    pub levels: Vec<Option<Vec<u64>>>,
}

pub fn confidence_distribution_by_consistency(
    records: &[EvaluationRecord],
    k: u32,
    bin_edges: &[f64],
) -> Result<ConfidenceDistribution, MetricsError> {
    if bin_edges.len() < 2
        || bin_edges.iter().any(|e| !e.is_finite())
        || bin_edges.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(MetricsError::BadBinEdges);
    }
    let n_bins = bin_edges.len() - 1;
    let last = bin_edges[n_bins];
    let levels = counts_by_level(records, k)?
        .iter()
        .map(|level| {
            (!level.is_empty()).then(|| {
                let mut counts = vec![0u64; n_bins];
                for r in level {
                    let c = r.confidence();
                    if c < bin_edges[0] || c > last {
                        continue;
                    }
                    // First edge strictly greater than c, minus one.
                    let bin = bin_edges.partition_point(|&e| e <= c).saturating_sub(1);
                    counts[bin.min(n_bins - 1)] += 1;
                }
                counts
            })
        })
        .collect();
    Ok(ConfidenceDistribution {
        bin_edges: bin_edges.to_vec(),
        levels,
    })
}
