//! Metric functions checked against brute-force re-derivations.

mod common;

use consistency_probe::domain::{parse_records_jsonl, records_to_jsonl, EvaluationRecord};
use consistency_probe::metrics::stats::spearman;
use consistency_probe::metrics::{
    accuracy_by_consistency, confidence_distribution_by_consistency, consistency_histogram,
    risk_coverage_curve, select, stratify_by_consistency, OrderBy, SelectionThreshold,
};
use consistency_probe::probe::ProbeConfig;
use consistency_probe::report::confidence_bin_edges;
use consistency_probe::simbench::Regime;
use proptest::prelude::*;

fn agree(r: &EvaluationRecord) -> u32 {
    r.consistency.as_ref().unwrap().agree_count
}

#[test]
fn stratified_slices_match_filtering() {
    let records = common::random_records(2000, 5, 11);
    let slices = stratify_by_consistency(&records, 5).unwrap();
    assert_eq!(slices.len(), 6);
    for (j, slice) in slices.iter().enumerate() {
        let expected: Vec<&str> = records
            .iter()
            .filter(|r| agree(r) >= j as u32)
            .map(|r| r.instance_id.as_str())
            .collect();
        let got: Vec<&str> = slice.iter().map(|r| r.instance_id.as_str()).collect();
        assert_eq!(got, expected, "slice n>={j}");
    }
    assert_eq!(slices[0].len(), records.len());
}

#[test]
fn histogram_and_accuracy_match_counting() {
    let records = common::random_records(2000, 5, 12);
    let hist = consistency_histogram(&records, 5).unwrap();
    let acc = accuracy_by_consistency(&records, 5).unwrap();
    assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for level in 0..=5u32 {
        let at: Vec<&EvaluationRecord> = records.iter().filter(|r| agree(r) == level).collect();
        assert_eq!(hist[level as usize], at.len() as f64 / 2000.0);
        let mean = at.iter().map(|r| r.soft_score.value()).sum::<f64>() / at.len() as f64;
        assert!((acc[level as usize].unwrap() - mean).abs() < 1e-12, "level {level}");
    }
}

#[test]
fn empty_levels_have_no_accuracy() {
    let records: Vec<EvaluationRecord> = common::random_records(300, 5, 13)
        .into_iter()
        .filter(|r| agree(r) != 2)
        .collect();
    let acc = accuracy_by_consistency(&records, 5).unwrap();
    assert_eq!(acc[2], None);
    let dist = confidence_distribution_by_consistency(&records, 5, &confidence_bin_edges(&records, 10)).unwrap();
    assert_eq!(dist.levels[2], None);
}

#[test]
fn confidence_distribution_matches_counting() {
    let records = common::random_records(2000, 5, 14);
    let edges = confidence_bin_edges(&records, 10);
    assert_eq!(edges.len(), 11);
    let dist = confidence_distribution_by_consistency(&records, 5, &edges).unwrap();
    for level in 0..=5u32 {
        let counts = dist.levels[level as usize].as_ref().unwrap();
        for b in 0..10 {
            let last = b == 9;
            let expected = records
                .iter()
                .filter(|r| agree(r) == level)
                .filter(|r| {
                    let c = r.confidence();
                    c >= edges[b] && (c < edges[b + 1] || (last && c <= edges[b + 1]))
                })
                .count() as u64;
            assert_eq!(counts[b], expected, "level {level} bin {b}");
        }
        let total: u64 = counts.iter().sum();
        assert_eq!(total as usize, records.iter().filter(|r| agree(r) == level).count());
    }
}

#[test]
fn select_matches_filter() {
    let records = common::random_records(500, 5, 15);
    for tau in [0.0, 0.25, 0.5, 0.99, 1.0] {
        let (answered, abstained) = select(&records, SelectionThreshold::new(tau).unwrap());
        let expected: Vec<&str> = records
            .iter()
            .filter(|r| 1.0 - r.confidence() <= tau)
            .map(|r| r.instance_id.as_str())
            .collect();
        let got: Vec<&str> = answered.iter().map(|r| r.instance_id.as_str()).collect();
        assert_eq!(got, expected, "tau {tau}");
        assert_eq!(answered.len() + abstained.len(), records.len());
    }
    assert!(SelectionThreshold::new(1.5).is_err());
}

#[test]
fn spearman_matches_pearson_on_ranks_without_ties() {
    let xs: Vec<f64> = (0..50).map(|i| ((i * 37) % 50) as f64).collect();
    let ys: Vec<f64> = (0..50).map(|i| ((i * 11 + 3) % 50) as f64).collect();
    let n = 50.0;
    let d2: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - b).powi(2)).sum();
    let expected = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
    let got = spearman(&xs, &ys).unwrap();
    assert!((got.rho - expected).abs() < 1e-12, "{} vs {expected}", got.rho);
    assert!(got.p_value > 0.0 && got.p_value <= 1.0);
}

#[test]
fn simulated_correct_answers_are_more_consistent() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    for regime in [Regime::InDistribution, Regime::Adversarial] {
        let records = rt.block_on(common::probe_world(5, 600, regime, &ProbeConfig::default()));
        let mean = |keep: &dyn Fn(&EvaluationRecord) -> bool| {
            let sel: Vec<f64> = records
                .iter()
                .filter(|r| keep(r))
                .map(|r| r.consistency.as_ref().unwrap().consistency)
                .collect();
            sel.iter().sum::<f64>() / sel.len() as f64
        };
        let right = mean(&|r| r.soft_score.thirds() == 3);
        let wrong = mean(&|r| r.soft_score.thirds() == 0);
        assert!(right > wrong, "{regime}: {right} vs {wrong}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slices_are_nested(seed in any::<u64>(), n in 1usize..200) {
        let records = common::random_records(n, 5, seed);
        let slices = stratify_by_consistency(&records, 5).unwrap();
        for w in slices.windows(2) {
            prop_assert!(w[1].len() <= w[0].len());
            prop_assert!(w[1].iter().all(|r| w[0].iter().any(|s| s.instance_id == r.instance_id)));
        }
    }

    #[test]
    fn curve_is_invariant_to_input_order(seed in any::<u64>(), n in 1usize..150, rot in 0usize..150) {
        let records = common::random_records(n, 5, seed);
        let mut shuffled = records.clone();
        shuffled.rotate_left(rot % n);
        shuffled.reverse();
        prop_assert_eq!(
            risk_coverage_curve(&records, OrderBy::Confidence).unwrap(),
            risk_coverage_curve(&shuffled, OrderBy::Confidence).unwrap()
        );
    }

    #[test]
    fn curve_ends_at_full_coverage_with_overall_risk(seed in any::<u64>(), n in 1usize..150) {
        let records = common::random_records(n, 5, seed);
        let curve = risk_coverage_curve(&records, OrderBy::Confidence).unwrap();
        let last = curve.last().unwrap();
        prop_assert_eq!(last.coverage, 1.0);
        let mean = records.iter().map(|r| r.soft_score.value()).sum::<f64>() / n as f64;
        prop_assert!((last.risk - (1.0 - mean)).abs() < 1e-12);
        prop_assert!(curve.iter().all(|p| (0.0..=1.0).contains(&p.risk)));
    }

    #[test]
    fn records_jsonl_round_trips(seed in any::<u64>(), n in 1usize..40) {
        let records = common::random_records(n, 3, seed);
        let text = records_to_jsonl(&records).unwrap();
        prop_assert_eq!(parse_records_jsonl(&text).unwrap(), records);
    }
}
