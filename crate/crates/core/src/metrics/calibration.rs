//! Temperature scaling and Adaptive Calibration Error.
//!
//! Raw rank-classification scores live in a narrow band near zero, so they are
//! rescaled by a scalar temperature and clipped to `[0, 1]`. Calibration error
//! is measured over equal-mass bins of confidence rank.

use std::cmp::Ordering;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::MetricsError;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemperatureParam(f64);

impl TemperatureParam {
    pub fn new(tau_temp: f64) -> Result<Self, MetricsError> {
        if !(tau_temp > 0.0 && tau_temp.is_finite()) {
            return Err(MetricsError::Invalid("temperature", tau_temp.to_string()));
        }
        Ok(Self(tau_temp))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `clip(confidence * tau, 0, 1)`.
pub fn temperature_scale(confidence: f64, temp: TemperatureParam) -> f64 {
    (confidence * temp.0).clamp(0.0, 1.0)
}

/// Splits `n` ranked items into `bins` contiguous ranges whose sizes differ
/// by at most one; the remainder goes to the lowest bins.
pub fn equal_mass_bins(n: usize, bins: usize) -> Vec<Range<usize>> {
    if bins == 0 {
        return Vec::new();
    }
    let base = n / bins;
    let rem = n % bins;
    let mut start = 0;
    (0..bins)
        .map(|i| {
            let len = base + usize::from(i < rem);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

fn check_inputs(confidences: &[f64], scores: &[f64], n_bins: usize) -> Result<(), MetricsError> {
    if confidences.len() != scores.len() {
        return Err(MetricsError::LengthMismatch(confidences.len(), scores.len()));
    }
    if n_bins == 0 || confidences.len() < n_bins {
        return Err(MetricsError::TooFewRecords {
            records: confidences.len(),
            bins: n_bins,
        });
    }
    if confidences.iter().chain(scores).any(|v| !v.is_finite()) {
        return Err(MetricsError::Invalid("input", "non-finite value".into()));
    }
    Ok(())
}

/// Ascending rank order by confidence, ties by score, so that binning does
/// not depend on input order.
fn rank_order(confidences: &[f64], scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..confidences.len()).collect();
    idx.sort_by(|&a, &b| {
        confidences[a]
            .total_cmp(&confidences[b])
            .then_with(|| scores[a].total_cmp(&scores[b]))
    });
    idx
}

fn mean_over(values: &[f64], order: &[usize], range: Range<usize>) -> f64 {
    let len = range.len() as f64;
    order[range].iter().map(|&i| values[i]).sum::<f64>() / len
}

fn binned_error(confidences: &[f64], scores: &[f64], order: &[usize], bins: &[Range<usize>]) -> f64 {
    let total: f64 = bins
        .iter()
        .map(|b| {
            (mean_over(confidences, order, b.clone()) - mean_over(scores, order, b.clone())).abs()
        })
        .sum();
    total / bins.len() as f64
}

/// Unweighted mean over equal-mass confidence bins of `|mean conf - mean score|`.
pub fn adaptive_ece(confidences: &[f64], scores: &[f64], n_bins: usize) -> Result<f64, MetricsError> {
    check_inputs(confidences, scores, n_bins)?;
    let order = rank_order(confidences, scores);
    let bins = equal_mass_bins(order.len(), n_bins);
    Ok(binned_error(confidences, scores, &order, &bins))
}

/// Inclusive arithmetic grid of candidate temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for TemperatureGrid {
    fn default() -> Self {
        Self {
            lo: 1.0,
            hi: 100.0,
            step: 0.1,
        }
    }
}

impl TemperatureGrid {
    /// Grid points, each snapped to nine decimals so that e.g. the 191st
    /// point of the default grid is exactly `20.0`.
    pub fn values(&self) -> Result<Vec<f64>, MetricsError> {
        if !(self.lo > 0.0 && self.step > 0.0 && self.hi >= self.lo)
            || ![self.lo, self.hi, self.step].iter().all(|v| v.is_finite())
        {
            return Err(MetricsError::EmptyGrid);
        }
        let steps = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        if steps > 10_000_000 {
            return Err(MetricsError::Invalid("grid", "more than 10^7 points".into()));
        }
        Ok((0..=steps)
            .map(|i| ((self.lo + i as f64 * self.step) * 1e9).round() / 1e9)
            .collect())
    }
}

impl FromStr for TemperatureGrid {
    type Err = MetricsError;

    /// Parses `lo:hi:step`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || MetricsError::Invalid("grid", s.to_owned());
        let [lo, hi, step] = parts.as_slice() else {
            return Err(bad());
        };
        let parse = |p: &str| p.trim().parse::<f64>().map_err(|_| bad());
        let grid = Self {
            lo: parse(lo)?,
            hi: parse(hi)?,
            step: parse(step)?,
        };
        grid.values()?;
        Ok(grid)
    }
}

/// Grid-searches the temperature minimizing Adaptive ECE; ties go to the
/// smallest temperature. Bins are formed on raw confidence rank (which
/// scaling preserves) and scaled confidences are averaged inside them.
pub fn fit_temperature(
    confidences: &[f64],
    scores: &[f64],
    grid: &TemperatureGrid,
    n_bins: usize,
) -> Result<TemperatureParam, MetricsError> {
    check_inputs(confidences, scores, n_bins)?;
    let taus = grid.values()?;
    let order = rank_order(confidences, scores);
    let bins = equal_mass_bins(order.len(), n_bins);
    let mut scaled = vec![0.0; confidences.len()];
    let mut best: Option<(f64, f64)> = None;
    for tau in taus {
        let t = TemperatureParam::new(tau)?;
        for (s, &c) in scaled.iter_mut().zip(confidences) {
            *s = temperature_scale(c, t);
        }
        let err = binned_error(&scaled, scores, &order, &bins);
        if best.is_none_or(|(_, e)| err.total_cmp(&e) == Ordering::Less) {
            best = Some((tau, err));
        }
    }
    let (tau, _) = best.ok_or(MetricsError::EmptyGrid)?;
    TemperatureParam::new(tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub percentile: u32,
    pub raw_confidence: f64,
    pub accuracy: f64,
    pub scaled_confidence: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub temperature: f64,
    pub rows: Vec<CalibrationRow>,
}

impl CalibrationTable {
    /// Checks the error column against `|accuracy - scaled_confidence|`.
    pub fn check(&self) -> Result<(), MetricsError> {
        for row in &self.rows {
            let expected = (row.accuracy - row.scaled_confidence).abs();
            if (expected - row.error).abs() > 1e-12 {
                return Err(MetricsError::Invalid(
                    "calibration table",
                    format!(
                        "percentile {}: error {} != |{} - {}|",
                        row.percentile, row.error, row.accuracy, row.scaled_confidence
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Mean of the error column, i.e. the Adaptive ECE of the scaled scores.
    pub fn mean_error(&self) -> f64 {
        self.rows.iter().map(|r| r.error).sum::<f64>() / self.rows.len() as f64
    }
}

/// Per-percentile-bin calibration summary at temperature `temp`.
pub fn calibration_table(
    confidences: &[f64],
    scores: &[f64],
    temp: TemperatureParam,
    n_bins: usize,
) -> Result<CalibrationTable, MetricsError> {
    check_inputs(confidences, scores, n_bins)?;
    let order = rank_order(confidences, scores);
    let scaled: Vec<f64> = confidences.iter().map(|&c| temperature_scale(c, temp)).collect();
    let rows = equal_mass_bins(order.len(), n_bins)
        .into_iter()
        .enumerate()
        .map(|(i, bin)| {
            let accuracy = mean_over(scores, &order, bin.clone());
            let scaled_confidence = mean_over(&scaled, &order, bin.clone());
            CalibrationRow {
                percentile: (i * 100 / n_bins) as u32,
                raw_confidence: mean_over(confidences, &order, bin),
                accuracy,
                scaled_confidence,
                error: (accuracy - scaled_confidence).abs(),
            }
        })
        .collect();
    Ok(CalibrationTable {
        temperature: temp.value(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(x: f64) -> TemperatureParam {
        TemperatureParam::new(x).unwrap()
    }

    #[test]
    fn scale_examples() {
        assert!((temperature_scale(0.02, t(19.9)) - 0.398).abs() < 1e-12);
        assert_eq!(temperature_scale(0.065, t(19.3)), 1.0);
        for x in [0.0, 0.3, 0.77, 1.0] {
            assert_eq!(temperature_scale(x, t(1.0)), x);
        }
        assert!(TemperatureParam::new(0.0).is_err());
        assert!(TemperatureParam::new(f64::NAN).is_err());
    }

    #[test]
    fn bins_spread_remainder_low() {
        let sizes: Vec<usize> = equal_mass_bins(23, 10).iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);
        assert_eq!(equal_mass_bins(23, 10).last().unwrap().end, 23);
    }

    #[test]
    fn ece_examples() {
        assert!((adaptive_ece(&[0.2, 0.8], &[0.0, 1.0], 2).unwrap() - 0.2).abs() < 1e-15);
        let c = [0.1, 0.4, 0.4, 0.9];
        assert_eq!(adaptive_ece(&c, &c, 2).unwrap(), 0.0);
        assert_eq!(
            adaptive_ece(&[0.1], &[0.1, 0.2], 1),
            Err(MetricsError::LengthMismatch(1, 2))
        );
        assert!(matches!(
            adaptive_ece(&[0.1], &[0.1], 2),
            Err(MetricsError::TooFewRecords { .. })
        ));
    }

    #[test]
    fn grid_points_hit_round_values() {
        let v = TemperatureGrid::default().values().unwrap();
        assert_eq!(v.len(), 991);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[190], 20.0);
        assert_eq!(v[189], 19.9);
        assert_eq!(v[183], 19.3);
        assert_eq!(v[115], 12.5);
        assert_eq!(*v.last().unwrap(), 100.0);
        assert_eq!("1:100:0.1".parse::<TemperatureGrid>().unwrap(), TemperatureGrid::default());
        assert!("1:100".parse::<TemperatureGrid>().is_err());
        assert!("5:1:0.1".parse::<TemperatureGrid>().is_err());
        assert!("1:2:0".parse::<TemperatureGrid>().is_err());
    }

    #[test]
    fn fit_examples() {
        let conf = vec![0.05; 20];
        let score = vec![1.0; 20];
        let tau = fit_temperature(&conf, &score, &TemperatureGrid::default(), 10).unwrap();
        assert_eq!(tau.value(), 20.0);

        let c: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
        let tau = fit_temperature(&c, &c, &TemperatureGrid::default(), 10).unwrap();
        assert_eq!(tau.value(), 1.0);
    }

    #[test]
    fn table_error_column_identity() {
        let c: Vec<f64> = (0..100).map(|i| 0.001 * i as f64).collect();
        let s: Vec<f64> = (0..100).map(|i| (i % 3) as f64 / 2.0).collect();
        let table = calibration_table(&c, &s, t(12.5), 10).unwrap();
        assert_eq!(table.rows.len(), 10);
        let pct: Vec<u32> = table.rows.iter().map(|r| r.percentile).collect();
        assert_eq!(pct, vec![0, 10, 20, 30, 40, 50, 60, 70, 80, 90]);
        table.check().unwrap();
        let scaled: Vec<f64> = c.iter().map(|&x| temperature_scale(x, t(12.5))).collect();
        assert!((table.mean_error() - adaptive_ece(&scaled, &s, 10).unwrap()).abs() < 1e-12);
        let mut broken = table.clone();
        broken.rows[0].error += 0.01;
        assert!(broken.check().is_err());
    }

    proptest! {
        #[test]
        fn ece_is_permutation_invariant(
            pairs in proptest::collection::vec((0.0f64..1.0, 0u8..4), 10..60),
            seed in any::<u64>(),
        ) {
            let conf: Vec<f64> = pairs.iter().map(|p| (p.0 * 20.0).round() / 20.0).collect();
            let score: Vec<f64> = pairs.iter().map(|p| f64::from(p.1) / 3.0).collect();
            let base = adaptive_ece(&conf, &score, 5).unwrap();
            let mut idx: Vec<usize> = (0..conf.len()).collect();
            use rand::{seq::SliceRandom, SeedableRng};
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pc: Vec<f64> = idx.iter().map(|&i| conf[i]).collect();
            let ps: Vec<f64> = idx.iter().map(|&i| score[i]).collect();
            prop_assert_eq!(adaptive_ece(&pc, &ps, 5).unwrap(), base);
        }

        #[test]
        fn scaling_preserves_order_below_clip(a in 0.0f64..1.0, b in 0.0f64..1.0, tau in 1.0f64..100.0) {
            let (lo, hi) = if a < b { (a / tau, b / tau) } else { (b / tau, a / tau) };
            prop_assume!(lo < hi);
            prop_assert!(temperature_scale(lo, t(tau)) <= temperature_scale(hi, t(tau)));
            prop_assert!(temperature_scale(hi, t(tau)) < 1.0 || hi * tau >= 1.0);
        }
    }
}
