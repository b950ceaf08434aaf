//! Black-box selective prediction for visual question answering.
//!
//! A VQA model reachable only through an API is probed with generated
//! rephrasings of each question; agreement across rephrasings is used as a
//! reliability signal next to the model's own confidence, and both are
//! evaluated with risk-coverage analysis and calibration metrics.

pub mod backends;
pub mod cache;
pub mod cli;
pub mod digest;
pub mod domain;
pub mod ingest;
pub mod metrics;
pub mod probe;
pub mod report;
pub mod simbench;
