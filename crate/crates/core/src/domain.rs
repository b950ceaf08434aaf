//! Core value types and answer canonicalization.
//!
//! Every type here is an immutable value once constructed and serializes to
//! canonical JSON: sorted keys, no insignificant whitespace, no NaN/Inf.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

/// Tolerance used when checking `rejection_score + confidence = 1`.
pub const REJECTION_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("non-finite number in {0}")]
    NonFinite(&'static str),
    #[error("json: {0}")]
    Json(String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> DomainError {
    DomainError::Invalid {
        field,
        reason: reason.into(),
    }
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Canonical form used for every answer comparison.
///
/// Lowercases, strips punctuation (a `.` survives only between two digits),
/// drops the standalone articles `a`/`an`/`the` and collapses whitespace.
pub fn normalize_answer(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let chars: Vec<char> = lowered.chars().collect();
    let mut stripped = String::with_capacity(lowered.len());
    for (i, &c) in chars.iter().enumerate() {
        if c == '.' {
            let prev_digit = i > 0 && chars[i - 1].is_ascii_digit();
            let next_digit = chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
            if prev_digit && next_digit {
                stripped.push(c);
            }
            continue;
        }
        if c.general_category_group() == GeneralCategoryGroup::Punctuation {
            continue;
        }
        stripped.push(c);
    }
    stripped
        .split_whitespace()
        .filter(|tok| !ARTICLES.contains(tok))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Answer equality after normalization.
pub fn answers_match(a: &str, b: &str) -> bool {
    normalize_answer(a) == normalize_answer(b)
}

/// Opaque image locator. Pixels are never touched.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_hash: Option<String>,
}

impl ImageRef {
    pub fn new(uri: impl Into<String>) -> Result<Self, DomainError> {
        let uri = uri.into();
        if uri.is_empty() {
            return Err(invalid("image.uri", "empty"));
        }
        Ok(Self {
            uri,
            content_hash: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualQuestionInstance {
    pub instance_id: String,
    pub image: ImageRef,
    pub question: String,
    pub annotations: Vec<String>,
    pub candidates: Vec<String>,
}

impl VisualQuestionInstance {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.instance_id.is_empty() {
            return Err(invalid("instance_id", "empty"));
        }
        if self.image.uri.is_empty() {
            return Err(invalid("image.uri", "empty"));
        }
        if self.question.trim().is_empty() {
            return Err(invalid("question", "empty"));
        }
        if self.annotations.is_empty() {
            return Err(invalid("annotations", "at least one annotation required"));
        }
        if self.candidates.is_empty() {
            return Err(invalid("candidates", "empty candidate list"));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.candidates.len());
        for c in &self.candidates {
            if !seen.insert(normalize_answer(c)) {
                return Err(invalid(
                    "candidates",
                    format!("duplicate after normalization: {c:?}"),
                ));
            }
        }
        Ok(())
    }
}

/// Black-box answer for one question: argmax candidate plus its raw score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub answer: String,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl Prediction {
    pub fn validate(&self) -> Result<(), DomainError> {
        if !self.confidence.is_finite() {
            return Err(DomainError::NonFinite("prediction.confidence"));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(invalid(
                "prediction.confidence",
                format!("{} outside [0,1]", self.confidence),
            ));
        }
        if let Some(scores) = &self.scores {
            if scores.iter().any(|s| !s.is_finite()) {
                return Err(DomainError::NonFinite("prediction.scores"));
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if scores.is_empty() || max.clamp(0.0, 1.0) != self.confidence {
                return Err(invalid("prediction.confidence", "must equal max of scores"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rephrasing {
    pub text: String,
    pub sample_index: u32,
    pub top_p: f64,
    pub seed: u64,
}

/// Agreement of the black-box model with itself over `k` generated rephrasings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    pub k: u32,
    pub rephrasings: Vec<Rephrasing>,
    pub rephrased_answers: Vec<String>,
    pub agree_count: u32,
    pub consistency: f64,
}

impl ConsistencyResult {
    /// Counts agreement of every rephrased answer with `original`.
    pub fn from_answers(
        original: &str,
        rephrasings: Vec<Rephrasing>,
        rephrased_answers: Vec<String>,
    ) -> Result<Self, DomainError> {
        let k = rephrasings.len();
        if k == 0 {
            return Err(invalid("k", "must be at least 1"));
        }
        if rephrased_answers.len() != k {
            return Err(invalid(
                "rephrased_answers",
                format!("expected {k} answers, got {}", rephrased_answers.len()),
            ));
        }
        let canonical = normalize_answer(original);
        let agree_count = rephrased_answers
            .iter()
            .filter(|a| normalize_answer(a) == canonical)
            .count() as u32;
        let k = k as u32;
        Ok(Self {
            k,
            rephrasings,
            rephrased_answers,
            agree_count,
            consistency: f64::from(agree_count) / f64::from(k),
        })
    }

    /// Consistency as an exact fraction `(agree_count, k)`.
    pub fn ratio(&self) -> (u32, u32) {
        (self.agree_count, self.k)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.k == 0 {
            return Err(invalid("consistency.k", "must be at least 1"));
        }
        let k = self.k as usize;
        if self.rephrasings.len() != k || self.rephrased_answers.len() != k {
            return Err(invalid("consistency", "list lengths must equal k"));
        }
        if self.agree_count > self.k {
            return Err(invalid("consistency.agree_count", "exceeds k"));
        }
        if self.consistency != f64::from(self.agree_count) / f64::from(self.k) {
            return Err(invalid("consistency.consistency", "must equal agree_count / k"));
        }
        if self.rephrasings.iter().any(|r| r.text.is_empty()) {
            return Err(invalid("consistency.rephrasings", "empty rephrasing text"));
        }
        Ok(())
    }
}

/// Soft VQA accuracy, stored as a count of thirds: `{0, 1/3, 2/3, 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SoftScore(u8);

impl SoftScore {
    pub const ZERO: SoftScore = SoftScore(0);
    pub const ONE: SoftScore = SoftScore(3);

    /// Score from a raw annotation match count, capped at three matches.
    pub fn from_matches(matches: usize) -> Self {
        SoftScore(matches.min(3) as u8)
    }

    pub fn thirds(self) -> u8 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 3.0
    }

    /// Maps a float back onto the four admissible values.
    pub fn from_value(v: f64) -> Result<Self, DomainError> {
        if !v.is_finite() {
            return Err(DomainError::NonFinite("soft_score"));
        }
        let thirds = (v * 3.0).round();
        if !(0.0..=3.0).contains(&thirds) || (v - thirds / 3.0).abs() > 1e-9 {
            return Err(invalid("soft_score", format!("{v} not in {{0, 1/3, 2/3, 1}}")));
        }
        Ok(SoftScore(thirds as u8))
    }
}

impl fmt::Display for SoftScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

impl Serialize for SoftScore {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for SoftScore {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        SoftScore::from_value(v).map_err(serde::de::Error::custom)
    }
}

/// One evaluated instance: the unit every metric consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub instance_id: String,
    pub prediction: Prediction,
    pub soft_score: SoftScore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<ConsistencyResult>,
    pub rejection_score: f64,
}

impl EvaluationRecord {
    pub fn new(
        instance_id: impl Into<String>,
        prediction: Prediction,
        soft_score: SoftScore,
        consistency: Option<ConsistencyResult>,
    ) -> Self {
        let rejection_score = 1.0 - prediction.confidence;
        Self {
            instance_id: instance_id.into(),
            prediction,
            soft_score,
            consistency,
            rejection_score,
        }
    }

    pub fn confidence(&self) -> f64 {
        self.prediction.confidence
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.instance_id.is_empty() {
            return Err(invalid("instance_id", "empty"));
        }
        self.prediction.validate()?;
        if !self.rejection_score.is_finite() {
            return Err(DomainError::NonFinite("rejection_score"));
        }
        if (self.rejection_score + self.prediction.confidence - 1.0).abs() > REJECTION_EPSILON {
            return Err(invalid("rejection_score", "must equal 1 - confidence"));
        }
        if let Some(c) = &self.consistency {
            c.validate()?;
        }
        Ok(())
    }
}

/// Serializes any value to canonical JSON (sorted keys, compact).
///
/// Fails if a non-finite float slipped in, since `serde_json` would
/// otherwise silently write `null`.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String, DomainError> {
    let v = serde_json::to_value(value).map_err(|e| DomainError::Json(e.to_string()))?;
    if contains_null_from_float(&v) {
        return Err(DomainError::NonFinite("serialized value"));
    }
    serde_json::to_string(&v).map_err(|e| DomainError::Json(e.to_string()))
}

/// Like [`to_canonical_json`] but lets `null` through, for report values that
/// use it to mark absent entries. Callers must ensure floats are finite.
pub fn to_canonical_json_with_nulls<T: Serialize>(value: &T) -> Result<String, DomainError> {
    let v = serde_json::to_value(value).map_err(|e| DomainError::Json(e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| DomainError::Json(e.to_string()))
}

// Optional fields are skipped when absent, so any `null` in our own output
// can only come from a NaN/Inf float.
fn contains_null_from_float(v: &serde_json::Value) -> bool {
    match v {
        serde_json::Value::Null => true,
        serde_json::Value::Array(a) => a.iter().any(contains_null_from_float),
        serde_json::Value::Object(o) => o.values().any(contains_null_from_float),
        _ => false,
    }
}

/// Parses records JSONL, validating every line. Blank lines are skipped.
pub fn parse_records_jsonl(input: &str) -> Result<Vec<EvaluationRecord>, RecordParseError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EvaluationRecord =
            serde_json::from_str(line).map_err(|e| RecordParseError {
                line: idx + 1,
                message: e.to_string(),
            })?;
        record.validate().map_err(|e| RecordParseError {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Writes records as canonical JSONL, one per line, LF terminated.
pub fn records_to_jsonl(records: &[EvaluationRecord]) -> Result<String, DomainError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&to_canonical_json(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("records line {line}: {message}")]
pub struct RecordParseError {
    pub line: usize,
    pub message: String,
}
