//! JSON-over-HTTP plumbing shared by the generation and extraction clients:
//! a transport trait, retry with exponential backoff, and a token-bucket rate
//! limiter.
//!
//! Endpoints with the `stub://` scheme are answered in-process by
//! [`crate::stub`], which keeps offline runs and tests network-free.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    /// Worth retrying: timeouts, connection failures, 429 and 5xx.
    #[error("transient failure: {0}")]
    Transient(String),
    /// Credentials rejected; retrying cannot help.
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request failed: {0}")]
    Permanent(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, TransportError::Transient(_))
    }
}

pub trait Transport: Send + Sync {
    fn post_json(&self, endpoint: &str, body: &Value) -> Result<Value, TransportError>;
}

/// Connection settings for one remote service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Requests per second.
    #[serde(default = "default_rate_limit")]
    pub rate_limit: f64,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_rate_limit() -> f64 {
    5.0
}
fn default_backoff_ms() -> u64 {
    500
}

impl ClientSpec {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            auth_env: None,
            request_timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            rate_limit: default_rate_limit(),
            backoff_base_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.endpoint.is_empty() {
            return Err("endpoint must be set".into());
        }
        if self.request_timeout_ms == 0 {
            return Err("request_timeout_ms must be > 0".into());
        }
        if !(self.rate_limit > 0.0) {
            return Err("rate_limit must be > 0".into());
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay: Duration::from_millis(self.backoff_base_ms),
        }
    }
}

/// Blocking HTTP transport. `stub://` endpoints are routed in-process.
pub struct HttpTransport {
    agent: ureq::Agent,
    auth_token: Option<String>,
}

impl HttpTransport {
    pub fn new(spec: &ClientSpec) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(spec.request_timeout_ms)))
            .http_status_as_error(false)
            .build();
        let auth_token = spec
            .auth_env
            .as_ref()
            .and_then(|name| std::env::var(name).ok());
        Self {
            agent: ureq::Agent::new_with_config(config),
            auth_token,
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(&ClientSpec::new("stub://"))
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, endpoint: &str, body: &Value) -> Result<Value, TransportError> {
        if let Some(service) = endpoint.strip_prefix("stub://") {
            return crate::stub::handle(service, body);
        }
        let mut req = self.agent.post(endpoint);
        if let Some(tok) = &self.auth_token {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_)
            | ureq::Error::Io(_)
            | ureq::Error::ConnectionFailed
            | ureq::Error::HostNotFound => TransportError::Transient(e.to_string()),
            other => TransportError::Permanent(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let mut body = resp.into_body();
        match status {
            200..=299 => body
                .read_json::<Value>()
                .map_err(|e| TransportError::Permanent(format!("bad JSON body: {e}"))),
            401 | 403 => Err(TransportError::Auth(format!("HTTP {status}"))),
            429 | 500..=599 => Err(TransportError::Transient(format!("HTTP {status}"))),
            _ => Err(TransportError::Permanent(format!("HTTP {status}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based): base * 2^attempt.
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << attempt.min(16))
    }

    /// Run `op`, retrying transient failures up to `max_retries` times.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, TransportError>,
    ) -> Result<T, TransportError> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    log::debug!("retrying after {e} (attempt {})", attempt + 1);
                    thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Token bucket shared by all workers talking to one endpoint.
pub struct RateLimiter {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(per_second: f64) -> Self {
        let capacity = per_second.max(1.0);
        Self {
            rate: per_second,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Block until a token is available, then take it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().unwrap();
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.rate;
                st.0 = (st.0 + refill).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - st.0) / self.rate)
            };
            thread::sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(10),
        };
        assert_eq!(p.delay(0), Duration::from_millis(10));
        assert_eq!(p.delay(2), Duration::from_millis(40));
    }

    #[test]
    fn retries_transient_then_succeeds() {
        let calls = AtomicU32::new(0);
        let p = RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(1),
        };
        let r = p.run(|| {
            if calls.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(TransportError::Transient("503".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(r, Ok(7));
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_and_never_retries_auth() {
        let calls = AtomicU32::new(0);
        let p = RetryPolicy {
            max_retries: 2,
            base_delay: Duration::from_millis(1),
        };
        let r: Result<(), _> = p.run(|| {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(TransportError::Transient("down".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        calls.store(0, Ordering::SeqCst);
        let r: Result<(), _> = p.run(|| {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(TransportError::Auth("401".into()))
        });
        assert!(matches!(r, Err(TransportError::Auth(_))));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn limiter_paces_requests() {
        let lim = RateLimiter::new(50.0);
        let start = Instant::now();
        for _ in 0..60 {
            lim.acquire();
        }
        // 50 burst tokens, then 10 more at 50/s.
        assert!(start.elapsed() >= Duration::from_millis(150));
    }

    #[test]
    fn spec_validation() {
        assert!(ClientSpec::new("http://x").validate().is_ok());
        let mut s = ClientSpec::new("http://x");
        s.rate_limit = 0.0;
        assert!(s.validate().is_err());
        s = ClientSpec::new("");
        assert!(s.validate().is_err());
    }
}
