//! JSON-over-HTTP plumbing shared by the remote embedding client and the
//! chat client: bearer auth, exponential backoff on transient failures and
//! a client-side rate limit.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

use crate::error::{Error, Result};

pub const API_BASE_VAR: &str = "KGLAB_API_BASE";
pub const API_KEY_VAR: &str = "KGLAB_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): `base * 2^retry`, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.min(16));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// A single-token bucket: at most one request start per `interval`.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(interval: Duration) -> Self {
        Self {
            interval,
            next_slot: Mutex::new(None),
        }
    }

    /// Blocks until the caller may start a request.
    pub fn acquire(&self) {
        let wait = {
            let mut slot = self.next_slot.lock().unwrap_or_else(|p| p.into_inner());
            let now = Instant::now();
            let start = match *slot {
                Some(t) if t > now => t,
                _ => now,
            };
            *slot = Some(start + self.interval);
            start.saturating_duration_since(now)
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

impl Default for RateLimiter {
    fn default() -> Self {
        Self::new(Duration::from_millis(100))
    }
}

/// Outcome of one attempt, as seen by the retry loop.
#[derive(Debug)]
pub enum Attempt<T> {
    Done(T),
    Retryable(String),
    Fatal(Error),
}

/// Runs `op` until it succeeds, fails fatally, or retries run out.
/// Returns the value and the number of retries that were needed.
pub fn with_retries<T>(policy: &RetryPolicy, mut op: impl FnMut(u32) -> Attempt<T>) -> Result<(T, u32)> {
    let mut retry = 0;
    loop {
        match op(retry) {
            Attempt::Done(v) => return Ok((v, retry)),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Retryable(msg) => {
                if retry >= policy.max_retries {
                    return Err(Error::RetriesExhausted {
                        attempts: retry + 1,
                        last: msg,
                    });
                }
                thread::sleep(policy.delay(retry));
                retry += 1;
            }
        }
    }
}

pub fn is_retryable_status(status: u16) -> bool {
    status == 408 || status == 429 || (500..600).contains(&status)
}

#[derive(Debug)]
pub struct JsonEndpoint {
    client: reqwest::blocking::Client,
    url: String,
    api_key: String,
    policy: RetryPolicy,
    limiter: RateLimiter,
}

impl JsonEndpoint {
    pub fn new(url: String, api_key: String, timeout: Duration, policy: RetryPolicy, limiter: RateLimiter) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            client,
            url,
            api_key,
            policy,
            limiter,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// POSTs `body` and parses the JSON reply, retrying transient failures.
    pub fn post(&self, body: &Value) -> Result<(Value, u32)> {
        with_retries(&self.policy, |_| {
            self.limiter.acquire();
            let resp = self
                .client
                .post(&self.url)
                .bearer_auth(&self.api_key)
                .json(body)
                .send();
            let resp = match resp {
                Ok(r) => r,
                Err(e) => return Attempt::Retryable(e.to_string()),
            };
            let status = resp.status().as_u16();
            let text = match resp.text() {
                Ok(t) => t,
                Err(e) => return Attempt::Retryable(e.to_string()),
            };
            if (200..300).contains(&status) {
                match serde_json::from_str(&text) {
                    Ok(v) => Attempt::Done(v),
                    Err(e) => Attempt::Fatal(e.into()),
                }
            } else if is_retryable_status(status) {
                Attempt::Retryable(format!("status {status}: {text}"))
            } else {
                Attempt::Fatal(Error::Http { status, body: text })
            }
        })
    }
}

/// Joins a base URL and a path without doubling slashes.
pub fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

/// Reads `KGLAB_API_BASE` / `KGLAB_API_KEY`.
pub fn credentials_from_env() -> Result<(String, String)> {
    let base = std::env::var(API_BASE_VAR).map_err(|_| Error::Config(format!("{API_BASE_VAR} is not set")))?;
    let key = std::env::var(API_KEY_VAR).map_err(|_| Error::Config(format!("{API_KEY_VAR} is not set")))?;
    if key.trim().is_empty() {
        return Err(Error::Config(format!("{API_KEY_VAR} is empty")));
    }
    Ok((base, key))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            base_delay: Duration::from_millis(10),
            max_delay: Duration::from_millis(50),
        };
        assert_eq!(p.delay(0), Duration::from_millis(10));
        assert_eq!(p.delay(1), Duration::from_millis(20));
        assert_eq!(p.delay(3), Duration::from_millis(50));
    }

    #[test]
    fn retry_loop_counts() {
        let p = RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(1),
        };
        let (v, retries) = with_retries(&p, |i| if i < 2 { Attempt::Retryable("busy".into()) } else { Attempt::Done(7) }).unwrap();
        assert_eq!((v, retries), (7, 2));
        let err = with_retries::<()>(&p, |_| Attempt::Retryable("busy".into())).unwrap_err();
        assert!(matches!(err, Error::RetriesExhausted { attempts: 4, .. }));
        let err = with_retries::<()>(&p, |_| Attempt::Fatal(Error::Http { status: 401, body: String::new() })).unwrap_err();
        assert!(matches!(err, Error::Http { status: 401, .. }));
    }

    #[test]
    fn rate_limiter_spaces_requests() {
        let lim = RateLimiter::new(Duration::from_millis(20));
        let start = Instant::now();
        for _ in 0..3 {
            lim.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(40));
    }

    #[test]
    fn status_classes() {
        assert!(is_retryable_status(429));
        assert!(is_retryable_status(503));
        assert!(!is_retryable_status(401));
        assert!(!is_retryable_status(400));
    }
}
