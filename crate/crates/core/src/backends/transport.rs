use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;

/// Status and body of a response that made it back to us.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawResponse {
    pub status: u16,
    pub body: String,
}

impl RawResponse {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

/// Moves one POST to a backend. `Err` means no response was received.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn post(&self, path: &str, body: String) -> Result<RawResponse, String>;
}

/// HTTP/1.1 JSON transport.
pub struct HttpTransport {
    client: reqwest::Client,
    base_url: String,
    bearer_token: Option<String>,
}

impl HttpTransport {
    pub fn new(base_url: &str, timeout: Duration, bearer_token: Option<String>) -> Result<Self, String> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self {
            client,
            base_url: base_url.trim_end_matches('/').to_owned(),
            bearer_token,
        })
    }
}

#[async_trait]
impl Transport for HttpTransport {
    async fn post(&self, path: &str, body: String) -> Result<RawResponse, String> {
        let mut req = self
            .client
            .post(format!("{}{}", self.base_url, path))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body);
        if let Some(token) = &self.bearer_token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().await.map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().await.map_err(|e| e.to_string())?;
        Ok(RawResponse { status, body })
    }
}

type Handler = dyn Fn(&str, &[u8]) -> RawResponse + Send + Sync;

/// Calls a request handler directly, skipping the network. Used to run the
/// simulated backends inside tests with the full client stack in front.
#[derive(Clone)]
pub struct InProcessTransport {
    handler: Arc<Handler>,
}

impl InProcessTransport {
    pub fn new(handler: impl Fn(&str, &[u8]) -> RawResponse + Send + Sync + 'static) -> Self {
        Self {
            handler: Arc::new(handler),
        }
    }
}

#[async_trait]
impl Transport for InProcessTransport {
    async fn post(&self, path: &str, body: String) -> Result<RawResponse, String> {
        Ok((self.handler)(path, body.as_bytes()))
    }
}
