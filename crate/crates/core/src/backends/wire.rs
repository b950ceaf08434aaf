//! JSON wire protocol shared by the harness client and the model servers.
//!
//! ```text
//! POST {base}/v1/answer             {"candidates":[..],"image_uri":..,"question":..}
//!                                -> {"scores":[..]}
//! POST {base}/v1/generate_question  {"answer":..,"image_uri":..,"num_samples":n,"seed":n,"top_p":f}
//!                                -> {"questions":[..]}
//! ```
//!
//! Request bodies are always emitted in canonical form (sorted keys, compact),
//! which is also what the response cache keys on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{to_canonical_json, Prediction};

pub const ANSWER_PATH: &str = "/v1/answer";
pub const GENERATE_PATH: &str = "/v1/generate_question";

/// Scores this far outside `[0, 1]` are treated as rounding noise and clamped.
pub const SCORE_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("malformed body: {0}")]
    Malformed(String),
    #[error("{0}")]
    Violation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRequest {
    pub image_uri: String,
    pub question: String,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub image_uri: String,
    pub answer: String,
    pub num_samples: u32,
    pub top_p: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub questions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBody {
    pub error: String,
}

pub fn encode<T: Serialize>(value: &T) -> Result<String, WireError> {
    to_canonical_json(value).map_err(|e| WireError::Malformed(e.to_string()))
}

/// Server-side decoding of `/v1/answer` requests.
pub fn decode_answer_request(body: &[u8]) -> Result<AnswerRequest, WireError> {
    let req: AnswerRequest =
        serde_json::from_slice(body).map_err(|e| WireError::Malformed(e.to_string()))?;
    if req.image_uri.is_empty() {
        return Err(WireError::Violation("image_uri is empty".into()));
    }
    if req.candidates.is_empty() {
        return Err(WireError::Violation("candidates is empty".into()));
    }
    Ok(req)
}

/// Server-side decoding of `/v1/generate_question` requests.
pub fn decode_generate_request(body: &[u8]) -> Result<GenerateRequest, WireError> {
    let req: GenerateRequest =
        serde_json::from_slice(body).map_err(|e| WireError::Malformed(e.to_string()))?;
    if req.image_uri.is_empty() {
        return Err(WireError::Violation("image_uri is empty".into()));
    }
    if req.num_samples == 0 {
        return Err(WireError::Violation("num_samples must be at least 1".into()));
    }
    if !(req.top_p > 0.0 && req.top_p <= 1.0) {
        return Err(WireError::Violation("top_p must lie in (0, 1]".into()));
    }
    Ok(req)
}

/// Client-side decoding of a `/v1/answer` response into raw scores.
pub fn decode_answer_response(body: &[u8], n_candidates: usize) -> Result<Vec<f64>, WireError> {
    let resp: AnswerResponse =
        serde_json::from_slice(body).map_err(|e| WireError::Malformed(e.to_string()))?;
    if resp.scores.len() != n_candidates {
        return Err(WireError::Violation(format!(
            "expected {n_candidates} scores, got {}",
            resp.scores.len()
        )));
    }
    for (i, &s) in resp.scores.iter().enumerate() {
        if !s.is_finite() || !(-SCORE_SLACK..=1.0 + SCORE_SLACK).contains(&s) {
            return Err(WireError::Violation(format!(
                "score {i} = {s} is not a probability"
            )));
        }
    }
    Ok(resp.scores.iter().map(|s| s.clamp(0.0, 1.0)).collect())
}

/// Client-side decoding of a `/v1/generate_question` response.
pub fn decode_generate_response(body: &[u8], num_samples: usize) -> Result<Vec<String>, WireError> {
    let resp: GenerateResponse =
        serde_json::from_slice(body).map_err(|e| WireError::Malformed(e.to_string()))?;
    if resp.questions.len() != num_samples {
        return Err(WireError::Violation(format!(
            "expected {num_samples} questions, got {}",
            resp.questions.len()
        )));
    }
    if let Some(i) = resp.questions.iter().position(|q| q.trim().is_empty()) {
        return Err(WireError::Violation(format!("question {i} is empty")));
    }
    Ok(resp.questions)
}

/// Rank classification: the answer is the highest-scoring candidate, ties
/// going to the lowest index. Scores are kept raw, never renormalized.
pub fn prediction_from_scores(candidates: &[String], scores: Vec<f64>) -> Result<Prediction, WireError> {
    if candidates.is_empty() || candidates.len() != scores.len() {
        return Err(WireError::Violation(
            "score list does not align with candidates".into(),
        ));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(Prediction {
        answer: candidates[best].clone(),
        confidence: scores[best].clamp(0.0, 1.0),
        scores: Some(scores),
    })
}
