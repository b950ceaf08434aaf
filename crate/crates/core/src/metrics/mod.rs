//! Selective-prediction and calibration metrics. Everything here is a pure
//! function of its inputs, with sort orders pinned so results are
//! bit-identical across runs.

mod calibration;
mod consistency;
mod risk;
mod soft;
pub mod stats;

use thiserror::Error;

pub use calibration::{
    adaptive_ece, calibration_table, equal_mass_bins, fit_temperature, temperature_scale,
    CalibrationRow, CalibrationTable, TemperatureGrid, TemperatureParam,
};
pub use consistency::{
    accuracy_by_consistency, consistency_histogram, confidence_distribution_by_consistency,
    consistency_k, stratify_by_consistency, ConfidenceDistribution,
};
pub use risk::{
    coverage_at_risk, risk_coverage_curve, risk_coverage_curve_over, select,
    stratified_coverage_at_risk, CoverageDenominator, OrderBy, RiskCoveragePoint,
    SelectionThreshold, StratumCoverage,
};
pub use soft::vqa_soft_score;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no records")]
    Empty,
    #[error("no annotations to score against")]
    NoAnnotations,
    #[error("length mismatch: {0} confidences vs {1} scores")]
    LengthMismatch(usize, usize),
    #[error("{records} records cannot fill {bins} bins")]
    TooFewRecords { records: usize, bins: usize },
    #[error("record {0} has no consistency result")]
    MissingConsistency(String),
    #[error("mixed consistency k: expected {expected}, record {instance_id} has {found}")]
    MixedK {
        expected: u32,
        found: u32,
        instance_id: String,
    },
    #[error("bin edges must be strictly increasing and at least two")]
    BadBinEdges,
    #[error("empty temperature grid")]
    EmptyGrid,
    #[error("invalid {0}: {1}")]
    Invalid(&'static str, String),
}
