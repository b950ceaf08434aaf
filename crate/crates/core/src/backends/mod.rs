//! Clients for the two remote models: the black-box VQA scorer and the
//! rephrasing generator.
//!
//! Every request goes through the same pipeline: cache lookup, in-flight
//! limit, rate limit, budget reservation, transport, retries. A cache hit
//! short-circuits all of it, so it costs no budget.

pub mod budget;
pub mod transport;
pub mod wire;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{Mutex, Semaphore};
use tokio::time::Instant;

use crate::cache::{cache_key, GetOrFetchError, ResponseCache};
use crate::domain::{ImageRef, Prediction, Rephrasing};
pub use budget::{BudgetExhausted, CallBudget, SharedBudget};
pub use transport::{HttpTransport, InProcessTransport, RawResponse, Transport};
use wire::{AnswerRequest, GenerateRequest, WireError, ANSWER_PATH, GENERATE_PATH};

pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error(transparent)]
    BudgetExhausted(#[from] BudgetExhausted),
    #[error("{backend_id}: transport failure: {message}")]
    Transport { backend_id: String, message: String },
    #[error("{backend_id}: protocol violation: {message}")]
    ProtocolViolation { backend_id: String, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache: {0}")]
    Cache(String),
}

/// A reachable model service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub base_url: String,
    pub backend_id: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit: Option<f64>,
    pub parallelism: usize,
    /// Passed through as `Authorization: Bearer ...`; never serialized.
    #[serde(skip)]
    pub bearer_token: Option<String>,
}

impl BackendEndpoint {
    pub fn new(base_url: impl Into<String>, backend_id: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            backend_id: backend_id.into(),
            timeout_ms: 30_000,
            max_retries: 3,
            rate_limit: None,
            parallelism: DEFAULT_PARALLELISM,
            bearer_token: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.base_url.is_empty() {
            return Err(BackendError::InvalidRequest("base_url is empty".into()));
        }
        if self.backend_id.is_empty() {
            return Err(BackendError::InvalidRequest("backend_id is empty".into()));
        }
        if self.parallelism == 0 {
            return Err(BackendError::InvalidRequest("parallelism must be >= 1".into()));
        }
        if let Some(r) = self.rate_limit {
            if !(r > 0.0 && r.is_finite()) {
                return Err(BackendError::InvalidRequest("rate_limit must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    async fn acquire(&self) {
        let wait_until = {
            let mut next = self.next.lock().await;
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        tokio::time::sleep_until(wait_until).await;
    }
}

fn backoff(attempt: u32) -> Duration {
    Duration::from_millis((25u64 << attempt.min(5)).min(1_000))
}

fn is_retryable(status: u16) -> bool {
    status == 429 || status >= 500
}

/// Client for one endpoint. Cheap to share behind an `Arc`.
pub struct BackendClient {
    endpoint: BackendEndpoint,
    transport: Arc<dyn Transport>,
    budget: SharedBudget,
    cache: Option<Arc<ResponseCache>>,
    inflight: Semaphore,
    limiter: Option<RateLimiter>,
}

impl BackendClient {
    pub fn new(
        endpoint: BackendEndpoint,
        transport: Arc<dyn Transport>,
        budget: SharedBudget,
        cache: Option<Arc<ResponseCache>>,
    ) -> Result<Self, BackendError> {
        endpoint.validate()?;
        let limiter = endpoint.rate_limit.map(|r| RateLimiter {
            interval: Duration::from_secs_f64(1.0 / r),
            next: Mutex::new(None),
        });
        Ok(Self {
            inflight: Semaphore::new(endpoint.parallelism),
            endpoint,
            transport,
            budget,
            cache,
            limiter,
        })
    }

    /// Client speaking HTTP to `endpoint.base_url`.
    pub fn http(
        endpoint: BackendEndpoint,
        budget: SharedBudget,
        cache: Option<Arc<ResponseCache>>,
    ) -> Result<Self, BackendError> {
        let transport = HttpTransport::new(
            &endpoint.base_url,
            endpoint.timeout(),
            endpoint.bearer_token.clone(),
        )
        .map_err(|message| BackendError::Transport {
            backend_id: endpoint.backend_id.clone(),
            message,
        })?;
        Self::new(endpoint, Arc::new(transport), budget, cache)
    }

    pub fn endpoint(&self) -> &BackendEndpoint {
        &self.endpoint
    }

    pub fn budget(&self) -> &SharedBudget {
        &self.budget
    }

    fn violation(&self, e: WireError) -> BackendError {
        BackendError::ProtocolViolation {
            backend_id: self.endpoint.backend_id.clone(),
            message: e.to_string(),
        }
    }

    async fn send(&self, path: &str, body: &str) -> Result<String, BackendError> {
        let id = &self.endpoint.backend_id;
        let mut attempt = 0;
        loop {
            let _permit = self.inflight.acquire().await.expect("semaphore never closed");
            if let Some(l) = &self.limiter {
                l.acquire().await;
            }
            let reservation = self.budget.reserve(id)?;
            let outcome = self.transport.post(path, body.to_owned()).await;
            let message = match outcome {
                Ok(resp) => {
                    reservation.commit();
                    if resp.is_success() {
                        return Ok(resp.body);
                    }
                    let msg = format!("HTTP {}: {}", resp.status, resp.body);
                    if !is_retryable(resp.status) {
                        return Err(BackendError::Transport {
                            backend_id: id.clone(),
                            message: msg,
                        });
                    }
                    msg
                }
                // Dropping the reservation returns the call to the budget.
                Err(e) => e,
            };
            if attempt >= self.endpoint.max_retries {
                return Err(BackendError::Transport {
                    backend_id: id.clone(),
                    message: format!("{message} (after {} attempts)", attempt + 1),
                });
            }
            tracing::debug!(backend = %id, attempt, %message, "retrying");
            drop(_permit);
            tokio::time::sleep(backoff(attempt)).await;
            attempt += 1;
        }
    }

    /// Sends `body` (canonical JSON) to `path`, consulting the cache first.
    /// Responses failing `check` are treated as fetch errors and never cached.
    async fn call<T>(
        &self,
        path: &str,
        body: String,
        check: impl Fn(&str) -> Result<T, WireError>,
    ) -> Result<T, BackendError> {
        let Some(cache) = &self.cache else {
            let raw = self.send(path, &body).await?;
            return check(&raw).map_err(|e| self.violation(e));
        };
        let id = &self.endpoint.backend_id;
        let key = cache_key(id, path, &body).map_err(|e| BackendError::Cache(e.to_string()))?;
        let raw = cache
            .get_or_fetch(id, &key, || async {
                let raw = self.send(path, &body).await?;
                check(&raw).map_err(|e| self.violation(e))?;
                Ok(raw)
            })
            .await
            .map_err(|e| match e {
                GetOrFetchError::Storage(s) => BackendError::Cache(s.to_string()),
                GetOrFetchError::Fetch(f) => f,
            })?;
        check(&raw).map_err(|e| self.violation(e))
    }

    /// Scores every candidate for `question` and returns the argmax.
    pub async fn query_answer(
        &self,
        image: &ImageRef,
        question: &str,
        candidates: &[String],
    ) -> Result<Prediction, BackendError> {
        if candidates.is_empty() {
            return Err(BackendError::ProtocolViolation {
                backend_id: self.endpoint.backend_id.clone(),
                message: "empty candidate list".into(),
            });
        }
        let req = AnswerRequest {
            image_uri: image.uri.clone(),
            question: question.to_owned(),
            candidates: candidates.to_vec(),
        };
        let body = wire::encode(&req).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let n = candidates.len();
        let scores = self
            .call(ANSWER_PATH, body, |raw| wire::decode_answer_response(raw.as_bytes(), n))
            .await?;
        wire::prediction_from_scores(candidates, scores).map_err(|e| self.violation(e))
    }

    /// Draws `k` questions conditioned on `(image, answer)` in one request.
    pub async fn generate_rephrasings(
        &self,
        image: &ImageRef,
        answer: &str,
        k: u32,
        top_p: f64,
        seed: u64,
    ) -> Result<Vec<Rephrasing>, BackendError> {
        if k == 0 {
            return Err(BackendError::InvalidRequest("k must be at least 1".into()));
        }
        if !(top_p > 0.0 && top_p <= 1.0) {
            return Err(BackendError::InvalidRequest("top_p must lie in (0, 1]".into()));
        }
        let req = GenerateRequest {
            image_uri: image.uri.clone(),
            answer: answer.to_owned(),
            num_samples: k,
            top_p,
            seed,
        };
        let body = wire::encode(&req).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let questions = self
            .call(GENERATE_PATH, body, |raw| {
                wire::decode_generate_response(raw.as_bytes(), k as usize)
            })
            .await?;
        Ok(questions
            .into_iter()
            .enumerate()
            .map(|(i, text)| Rephrasing {
                text,
                sample_index: i as u32,
                top_p,
                seed,
            })
            .collect())
    }
}
