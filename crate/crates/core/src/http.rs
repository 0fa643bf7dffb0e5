//! Blocking JSON-over-HTTPS transport with retry and backoff, shared by the
//! chat-completion and embedding clients.

use std::time::Duration;

use log::{debug, warn};
use thiserror::Error;

/// A raw endpoint reply. Non-2xx statuses are replies, not errors.
#[derive(Debug, Clone)]
pub struct HttpReply {
    pub status: u16,
    /// Parsed `Retry-After` header, when the endpoint sent one.
    pub retry_after: Option<Duration>,
    pub body: String,
}

#[derive(Debug, Error)]
#[error("transport error: {0}")]
pub struct TransportError(pub String);

/// Seam between the clients and the network; tests substitute a capture double.
pub trait JsonTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &serde_json::Value) -> Result<HttpReply, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        UreqTransport { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        UreqTransport::new(Duration::from_secs(120))
    }
}

impl JsonTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &serde_json::Value) -> Result<HttpReply, TransportError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(parse_retry_after);
        let body = resp.body_mut().read_to_string().map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpReply { status, retry_after, body })
    }
}

/// Seconds form only; HTTP-date values are ignored and fall back to backoff.
pub fn parse_retry_after(value: &str) -> Option<Duration> {
    let secs: f64 = value.trim().parse().ok()?;
    (secs.is_finite() && secs >= 0.0).then(|| Duration::from_secs_f64(secs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 5, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(60) }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy { max_attempts, base_delay: Duration::ZERO, max_delay: Duration::ZERO }
    }

    /// Delay before retry number `attempt` (1-based). A server hint wins but
    /// is still capped.
    pub fn delay(&self, attempt: u32, hint: Option<Duration>) -> Duration {
        let backoff = self.base_delay.saturating_mul(1u32 << attempt.saturating_sub(1).min(16));
        hint.unwrap_or(backoff).min(self.max_delay.max(self.base_delay))
    }
}

#[derive(Debug, Error)]
pub enum CallError {
    #[error("endpoint rejected credentials (HTTP {status}): {body}")]
    Auth { status: u16, body: String },
    #[error("endpoint rejected request (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
}

impl CallError {
    pub fn is_fatal(&self) -> bool {
        matches!(self, CallError::Auth { .. })
    }
}

/// POST with retries on transport errors, 408, 409, 429 and 5xx.
pub fn post_with_retry(
    transport: &dyn JsonTransport,
    url: &str,
    bearer: Option<&str>,
    body: &serde_json::Value,
    policy: &RetryPolicy,
) -> Result<String, CallError> {
    let attempts = policy.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 1..=attempts {
        let hint = match transport.post_json(url, bearer, body) {
            Ok(reply) if (200..300).contains(&reply.status) => return Ok(reply.body),
            Ok(reply) if reply.status == 401 || reply.status == 403 => {
                return Err(CallError::Auth { status: reply.status, body: reply.body })
            }
            Ok(reply) if matches!(reply.status, 408 | 409 | 429) || reply.status >= 500 => {
                last = format!("HTTP {}: {}", reply.status, reply.body);
                reply.retry_after
            }
            Ok(reply) => return Err(CallError::Rejected { status: reply.status, body: reply.body }),
            Err(e) => {
                last = e.to_string();
                None
            }
        };
        if attempt < attempts {
            let wait = policy.delay(attempt, hint);
            debug!("attempt {attempt} failed ({last}); retrying in {wait:?}");
            std::thread::sleep(wait);
        }
    }
    warn!("request to {url} exhausted {attempts} attempts");
    Err(CallError::Exhausted { attempts, last })
}
