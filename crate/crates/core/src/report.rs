//! Publication-style tables (CSV, rounded) with full-precision JSON twins, and
//! the run manifest. Everything here is recomputable from a records file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendEndpoint, CallBudget};
use crate::digest::sha256_hex;
use crate::domain::{to_canonical_json, to_canonical_json_with_nulls, EvaluationRecord};
use crate::metrics::stats::{consistency_accuracy_correlation, Correlation};
use crate::metrics::{
    accuracy_by_consistency, confidence_distribution_by_consistency, consistency_histogram,
    consistency_k, stratified_coverage_at_risk, CalibrationTable, ConfidenceDistribution,
    CoverageDenominator, MetricsError, StratumCoverage,
};
use crate::probe::{InstanceFailure, ProbeConfig};

pub const DEFAULT_RISK_LEVELS: [f64; 5] = [0.10, 0.15, 0.20, 0.30, 0.40];
pub const CONFIDENCE_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Inconsistent(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serialize(String),
}

fn csv_string(header: &[String], rows: &[Vec<String>]) -> Result<String, ReportError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let ser = |e: csv::Error| ReportError::Serialize(e.to_string());
    w.write_record(header).map_err(ser)?;
    for row in rows {
        w.write_record(row).map_err(ser)?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Serialize(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| ReportError::Serialize(e.to_string()))
}

fn canonical<T: Serialize>(v: &T) -> Result<String, ReportError> {
    let mut s = to_canonical_json(v).map_err(|e| ReportError::Serialize(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Risk level as a percentage label: `0.1 -> "10"`, `0.125 -> "12.5"`.
pub fn risk_label(level: f64) -> String {
    let pct = (level * 100.0 * 1e6).round() / 1e6;
    let s = format!("{pct}");
    s.strip_suffix(".0").map(str::to_owned).unwrap_or(s)
}

/// Coverage table: one row per slice `n>=j`, one column per risk level,
/// two decimals.
pub fn emit_risk_coverage(strata: &[StratumCoverage], risk_levels: &[f64]) -> Result<String, ReportError> {
    let header: Vec<String> = std::iter::once("consistency".to_owned())
        .chain(risk_levels.iter().map(|r| format!("risk_{}", risk_label(*r))))
        .collect();
    let rows: Vec<Vec<String>> = strata
        .iter()
        .map(|s| {
            if s.coverage.len() != risk_levels.len() {
                return Err(ReportError::Inconsistent(format!(
                    "slice n>={} has {} coverage values for {} risk levels",
                    s.level,
                    s.coverage.len(),
                    risk_levels.len()
                )));
            }
            Ok(std::iter::once(format!("n>={}", s.level))
                .chain(s.coverage.iter().map(|c| format!("{c:.2}")))
                .collect())
        })
        .collect::<Result<_, _>>()?;
    csv_string(&header, &rows)
}

#[derive(Serialize)]
struct RiskCoverageJson<'a> {
    coverage_denominator: CoverageDenominator,
    risk_levels: &'a [f64],
    slices: Vec<SliceJson<'a>>,
}

#[derive(Serialize)]
struct SliceJson<'a> {
    level: u32,
    slice_size: usize,
    coverage: &'a [f64],
}

/// Full-precision twin of [`emit_risk_coverage`].
pub fn emit_risk_coverage_json(
    strata: &[StratumCoverage],
    risk_levels: &[f64],
    denominator: CoverageDenominator,
) -> Result<String, ReportError> {
    canonical(&RiskCoverageJson {
        coverage_denominator: denominator,
        risk_levels,
        slices: strata
            .iter()
            .map(|s| SliceJson {
                level: s.level,
                slice_size: s.slice_size,
                coverage: &s.coverage,
            })
            .collect(),
    })
}

/// Calibration table with three decimals. The error column is recomputed
/// from accuracy and scaled confidence and must match the stored value.
pub fn emit_calibration_table(table: &CalibrationTable) -> Result<String, ReportError> {
    table.check().map_err(|e| ReportError::Inconsistent(e.to_string()))?;
    let header: Vec<String> = ["percentile", "raw_confidence", "accuracy", "scaled_confidence", "error"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let error = (r.accuracy - r.scaled_confidence).abs();
            vec![
                r.percentile.to_string(),
                format!("{:.3}", r.raw_confidence),
                format!("{:.3}", r.accuracy),
                format!("{:.3}", r.scaled_confidence),
                format!("{error:.3}"),
            ]
        })
        .collect();
    csv_string(&header, &rows)
}

pub fn emit_consistency_histogram(fractions: &[f64], k: u32) -> Result<String, ReportError> {
    let header = vec!["agree_count".to_owned(), "consistency".to_owned(), "fraction".to_owned()];
    let rows: Vec<Vec<String>> = fractions
        .iter()
        .enumerate()
        .map(|(j, f)| vec![j.to_string(), format!("{j}/{k}"), format!("{f:.4}")])
        .collect();
    csv_string(&header, &rows)
}

/// Empty levels get an empty accuracy cell, not zero.
pub fn emit_accuracy_by_consistency(accuracy: &[Option<f64>], k: u32) -> Result<String, ReportError> {
    let header = vec!["agree_count".to_owned(), "consistency".to_owned(), "accuracy".to_owned()];
    let rows: Vec<Vec<String>> = accuracy
        .iter()
        .enumerate()
        .map(|(j, a)| {
            vec![
                j.to_string(),
                format!("{j}/{k}"),
                a.map(|v| format!("{v:.4}")).unwrap_or_default(),
            ]
        })
        .collect();
    csv_string(&header, &rows)
}

/// Long format, one row per (level, bin); empty levels are omitted.
pub fn emit_confidence_distribution(dist: &ConfidenceDistribution) -> Result<String, ReportError> {
    let header = ["agree_count", "bin_lo", "bin_hi", "count"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for (j, level) in dist.levels.iter().enumerate() {
        let Some(counts) = level else { continue };
        for (b, c) in counts.iter().enumerate() {
            rows.push(vec![
                j.to_string(),
                format!("{}", dist.bin_edges[b]),
                format!("{}", dist.bin_edges[b + 1]),
                c.to_string(),
            ]);
        }
    }
    csv_string(&header, &rows)
}

/// Equal-width edges from 0 to the largest confidence present (raw
/// scores are small, so a fixed `[0, 1]` grid would put everything in one bin).
pub fn confidence_bin_edges(records: &[EvaluationRecord], bins: usize) -> Vec<f64> {
    let max = records.iter().map(|r| r.confidence()).fold(0.0, f64::max);
    let hi = if max > 0.0 { max } else { 1.0 };
    (0..=bins).map(|i| hi * i as f64 / bins as f64).collect()
}

/// All evaluation outputs, full precision.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationSummary {
    pub records: usize,
    pub k: u32,
    pub coverage_denominator: CoverageDenominator,
    pub risk_levels: Vec<f64>,
    pub risk_coverage: Vec<StratumCoverage>,
    pub consistency_histogram: Vec<f64>,
    pub accuracy_by_consistency: Vec<Option<f64>>,
    pub confidence_distribution: ConfidenceDistribution,
    pub consistency_accuracy_spearman: Option<Correlation>,
}

pub fn summarize(
    records: &[EvaluationRecord],
    risk_levels: &[f64],
    denominator: CoverageDenominator,
) -> Result<EvaluationSummary, ReportError> {
    let k = consistency_k(records)?;
    let edges = confidence_bin_edges(records, CONFIDENCE_BINS);
    Ok(EvaluationSummary {
        records: records.len(),
        k,
        coverage_denominator: denominator,
        risk_levels: risk_levels.to_vec(),
        risk_coverage: stratified_coverage_at_risk(records, risk_levels, denominator)?,
        consistency_histogram: consistency_histogram(records, k)?,
        accuracy_by_consistency: accuracy_by_consistency(records, k)?,
        confidence_distribution: confidence_distribution_by_consistency(records, k, &edges)?,
        consistency_accuracy_spearman: consistency_accuracy_correlation(records).ok(),
    })
}

/// File names written by [`write_evaluation`], in write order.
pub const EVALUATION_FILES: [&str; 6] = [
    "risk_coverage.csv",
    "risk_coverage.json",
    "consistency_histogram.csv",
    "accuracy_by_consistency.csv",
    "confidence_distribution.csv",
    "summary.json",
];

fn write(path: PathBuf, content: &str) -> Result<PathBuf, ReportError> {
    std::fs::write(&path, content).map_err(|source| ReportError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Writes every evaluation artifact into `out_dir`.
pub fn write_evaluation(
    summary: &EvaluationSummary,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    std::fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_owned(),
        source,
    })?;
    // Curves are bulky and derivable; the summary keeps the table values only.
    let mut slim = summary.clone();
    for s in &mut slim.risk_coverage {
        s.curve.clear();
    }
    let contents = [
        emit_risk_coverage(&summary.risk_coverage, &summary.risk_levels)?,
        emit_risk_coverage_json(&summary.risk_coverage, &summary.risk_levels, summary.coverage_denominator)?,
        emit_consistency_histogram(&summary.consistency_histogram, summary.k)?,
        emit_accuracy_by_consistency(&summary.accuracy_by_consistency, summary.k)?,
        emit_confidence_distribution(&summary.confidence_distribution)?,
        {
            let mut s = to_canonical_json_with_nulls(&slim)
                .map_err(|e| ReportError::Serialize(e.to_string()))?;
            s.push('\n');
            s
        },
    ];
    EVALUATION_FILES
        .iter()
        .zip(contents)
        .map(|(name, content)| write(out_dir.join(name), &content))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, ReportError> {
        let bytes = std::fs::read(path).map_err(|source| ReportError::Io {
            path: path.to_owned(),
            source,
        })?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSummary {
    pub backend_id: String,
    pub base_url: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit: Option<f64>,
    pub parallelism: usize,
}

impl From<&BackendEndpoint> for BackendSummary {
    fn from(e: &BackendEndpoint) -> Self {
        Self {
            backend_id: e.backend_id.clone(),
            base_url: e.base_url.clone(),
            timeout_ms: e.timeout_ms,
            max_retries: e.max_retries,
            rate_limit: e.rate_limit,
            parallelism: e.parallelism,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_calls: Option<u64>,
    pub calls_made: BTreeMap<String, u64>,
    pub total_calls: u64,
}

impl From<&CallBudget> for BudgetSummary {
    fn from(b: &CallBudget) -> Self {
        Self {
            max_calls: b.max_calls,
            calls_made: b.calls_made.clone(),
            total_calls: b.total(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSummary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    pub hits: u64,
    pub misses: u64,
}

/// Everything needed to re-run a probe byte-identically against a warm cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub dataset_name: String,
    pub dataset_manifest: String,
    pub dataset_files: Vec<FileDigest>,
    pub instances: usize,
    pub config: ProbeConfig,
    pub backends: Vec<BackendSummary>,
    pub budget: BudgetSummary,
    pub cache: CacheSummary,
    pub records_path: String,
    pub records_written: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records_sha256: Option<String>,
    pub failures: Vec<InstanceFailure>,
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<String>,
}

pub fn emit_run_manifest(manifest: &RunManifest) -> Result<String, ReportError> {
    canonical(manifest)
}
