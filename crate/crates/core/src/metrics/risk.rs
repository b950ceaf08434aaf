use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::consistency::{consistency_k, stratify_by_consistency};
use super::MetricsError;
use crate::domain::EvaluationRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskCoveragePoint {
    pub coverage: f64,
    pub risk: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OrderBy {
    #[default]
    Confidence,
}

/// What coverage is measured against when curves are computed on a subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageDenominator {
    /// Fraction of the subset itself.
    #[default]
    Slice,
    /// Fraction of the full record set the subset was drawn from.
    Full,
}

impl std::str::FromStr for CoverageDenominator {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "slice" => Ok(Self::Slice),
            "full" => Ok(Self::Full),
            other => Err(MetricsError::Invalid("coverage denominator", other.to_owned())),
        }
    }
}

/// Most confident first; equal confidences ordered by instance id.
fn by_confidence_desc(a: &&EvaluationRecord, b: &&EvaluationRecord) -> Ordering {
    b.confidence()
        .total_cmp(&a.confidence())
        .then_with(|| a.instance_id.cmp(&b.instance_id))
}

/// Answers the `m` most confident records for every `m`, measuring risk
/// (`1 - mean soft accuracy`) on the answered prefix. Coverage is `m / N`.
pub fn risk_coverage_curve(
    records: &[EvaluationRecord],
    order_by: OrderBy,
) -> Result<Vec<RiskCoveragePoint>, MetricsError> {
    let refs: Vec<&EvaluationRecord> = records.iter().collect();
    risk_coverage_curve_over(&refs, records.len(), order_by)
}

/// Like [`risk_coverage_curve`] on a subset, with coverage measured against
/// `denominator` records.
pub fn risk_coverage_curve_over(
    records: &[&EvaluationRecord],
    denominator: usize,
    OrderBy::Confidence: OrderBy,
) -> Result<Vec<RiskCoveragePoint>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    if denominator < records.len() {
        return Err(MetricsError::Invalid(
            "denominator",
            format!("{denominator} < {} records", records.len()),
        ));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(by_confidence_desc);
    // Soft scores are exact thirds, so the prefix error is an exact integer
    // count of thirds and each risk is one correctly rounded division.
    let mut score_thirds: u64 = 0;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let m = i as u64 + 1;
            score_thirds += u64::from(r.soft_score.thirds());
            RiskCoveragePoint {
                coverage: m as f64 / denominator as f64,
                risk: (3 * m - score_thirds) as f64 / (3 * m) as f64,
            }
        })
        .collect())
}

/// Largest coverage whose risk is at most `risk_level`, or 0.
pub fn coverage_at_risk(curve: &[RiskCoveragePoint], risk_level: f64) -> f64 {
    curve
        .iter()
        .filter(|p| p.risk <= risk_level)
        .map(|p| p.coverage)
        .fold(0.0, f64::max)
}

/// Coverage-at-risk for one consistency slice (`agree_count >= level`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCoverage {
    pub level: u32,
    pub slice_size: usize,
    pub coverage: Vec<f64>,
    /// The slice's full risk-coverage curve, empty for an empty slice.
    pub curve: Vec<RiskCoveragePoint>,
}

/// Coverage at each risk level for the nested slices `n >= 0 .. n >= k`.
pub fn stratified_coverage_at_risk(
    records: &[EvaluationRecord],
    risk_levels: &[f64],
    denominator: CoverageDenominator,
) -> Result<Vec<StratumCoverage>, MetricsError> {
    let k = consistency_k(records)?;
    let slices = stratify_by_consistency(records, k)?;
    slices
        .into_iter()
        .enumerate()
        .map(|(level, slice)| {
            let curve = if slice.is_empty() {
                Vec::new()
            } else {
                let denom = match denominator {
                    CoverageDenominator::Slice => slice.len(),
                    CoverageDenominator::Full => records.len(),
                };
                risk_coverage_curve_over(&slice, denom, OrderBy::Confidence)?
            };
            Ok(StratumCoverage {
                level: level as u32,
                slice_size: slice.len(),
                coverage: risk_levels
                    .iter()
                    .map(|&r| coverage_at_risk(&curve, r))
                    .collect(),
                curve,
            })
        })
        .collect()
}

/// Abstention threshold on the rejection score `1 - confidence`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionThreshold {
    pub tau_sel: f64,
}

impl SelectionThreshold {
    pub fn new(tau_sel: f64) -> Result<Self, MetricsError> {
        if !(0.0..=1.0).contains(&tau_sel) {
            return Err(MetricsError::Invalid("tau_sel", tau_sel.to_string()));
        }
        Ok(Self { tau_sel })
    }

    pub fn abstains(&self, record: &EvaluationRecord) -> bool {
        record.rejection_score > self.tau_sel
    }
}

/// Splits records into `(answered, abstained)`, preserving input order.
pub fn select(
    records: &[EvaluationRecord],
    threshold: SelectionThreshold,
) -> (Vec<&EvaluationRecord>, Vec<&EvaluationRecord>) {
    records.iter().partition(|r| !threshold.abstains(r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Prediction, SoftScore};

    fn rec(id: &str, conf: f64, score: SoftScore) -> EvaluationRecord {
        EvaluationRecord::new(
            id,
            Prediction {
                answer: "a".into(),
                confidence: conf,
                scores: None,
            },
            score,
            None,
        )
    }

    fn example() -> Vec<EvaluationRecord> {
        vec![
            rec("c", 0.7, SoftScore::ONE),
            rec("a", 0.9, SoftScore::ONE),
            rec("d", 0.6, SoftScore::ZERO),
            rec("b", 0.8, SoftScore::ZERO),
        ]
    }

    #[test]
    fn hand_computed_curve() {
        let curve = risk_coverage_curve(&example(), OrderBy::Confidence).unwrap();
        let got: Vec<(f64, f64)> = curve.iter().map(|p| (p.coverage, p.risk)).collect();
        assert_eq!(got, vec![(0.25, 0.0), (0.5, 0.5), (0.75, 1.0 / 3.0), (1.0, 0.5)]);
    }

    #[test]
    fn coverage_at_risk_examples() {
        let curve = risk_coverage_curve(&example(), OrderBy::Confidence).unwrap();
        assert_eq!(coverage_at_risk(&curve, 0.40), 0.75);
        assert_eq!(coverage_at_risk(&curve, 0.0), 0.25);
        assert_eq!(coverage_at_risk(&curve, 1.0), 1.0);
        let bad = [rec("x", 0.9, SoftScore::ZERO)];
        let curve = risk_coverage_curve(&bad, OrderBy::Confidence).unwrap();
        assert_eq!(coverage_at_risk(&curve, 0.5), 0.0);
    }

    #[test]
    fn all_correct_has_zero_risk() {
        let recs: Vec<_> = (0..7)
            .map(|i| rec(&i.to_string(), 0.1 * i as f64, SoftScore::ONE))
            .collect();
        let curve = risk_coverage_curve(&recs, OrderBy::Confidence).unwrap();
        assert!(curve.iter().all(|p| p.risk == 0.0));
        assert_eq!(curve.len(), 7);
    }

    #[test]
    fn ties_broken_by_instance_id() {
        let recs = vec![rec("b", 0.5, SoftScore::ZERO), rec("a", 0.5, SoftScore::ONE)];
        let curve = risk_coverage_curve(&recs, OrderBy::Confidence).unwrap();
        assert_eq!(curve[0].risk, 0.0);
    }

    #[test]
    fn empty_input_rejected() {
        assert_eq!(risk_coverage_curve(&[], OrderBy::Confidence), Err(MetricsError::Empty));
    }

    #[test]
    fn full_denominator_scales_coverage() {
        let recs = example();
        let refs: Vec<_> = recs.iter().take(2).collect();
        let curve = risk_coverage_curve_over(&refs, 4, OrderBy::Confidence).unwrap();
        assert_eq!(curve.last().unwrap().coverage, 0.5);
    }

    #[test]
    fn select_extremes() {
        let mut recs = example();
        recs.push(rec("sure", 1.0, SoftScore::ONE));
        let (answered, abstained) = select(&recs, SelectionThreshold::new(1.0).unwrap());
        assert_eq!((answered.len(), abstained.len()), (5, 0));
        let (answered, abstained) = select(&recs, SelectionThreshold::new(0.0).unwrap());
        assert_eq!(answered.len(), 1);
        assert_eq!(answered[0].instance_id, "sure");
        assert_eq!(abstained.len(), 4);
        assert!(SelectionThreshold::new(1.5).is_err());
    }
}
