//! Retries, exponential backoff and `Retry-After` backpressure.
//!
//! Two signals drive a retry. A rate-limited response carrying a
//! delta-seconds `Retry-After` header puts the whole endpoint into cooldown
//! through the shared [`BackpressureGate`], so every worker holds off, not
//! just the one that saw the 429. Any other retryable status, or a transport
//! failure, backs off only the caller using the [`next_delay`] schedule.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::future::BoxFuture;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::time::Instant;

use crate::http::{Endpoint, HttpMessage, HttpRequestData, HttpResponseData};
use crate::metrics::Metrics;
use crate::transport::{Transport, TransportError};

/// Source of time for every wait in this module.
///
/// [`TokioClock`] follows tokio's clock, so a runtime with paused time runs
/// retries in virtual time.
pub trait Clock: Send + Sync {
    fn now(&self) -> Instant;
    fn sleep(&self, d: Duration) -> BoxFuture<'static, ()>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TokioClock;

impl Clock for TokioClock {
    fn now(&self) -> Instant {
        Instant::now()
    }

    fn sleep(&self, d: Duration) -> BoxFuture<'static, ()> {
        Box::pin(tokio::time::sleep(d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
    pub multiplier: f64,
    /// Ceiling on the nominal delay before jitter.
    #[serde(with = "millis")]
    pub max_delay: Duration,
    pub jitter_fraction: f64,
    pub retryable_statuses: BTreeSet<u16>,
    pub retry_on_transport_error: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            base_delay: Duration::from_millis(100),
            multiplier: 2.0,
            max_delay: Duration::from_secs(30),
            jitter_fraction: 0.2,
            retryable_statuses: [408, 429, 500, 502, 503, 504].into_iter().collect(),
            retry_on_transport_error: true,
        }
    }
}

impl RetryPolicy {
    /// A policy that never retries.
    pub fn none() -> Self {
        RetryPolicy {
            max_retries: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ReliabilityError> {
        let bad = |m: &str| Err(ReliabilityError::InvalidPolicy(m.to_owned()));
        if self.base_delay.is_zero() {
            return bad("base_delay must be positive");
        }
        if !(self.multiplier >= 1.0 && self.multiplier.is_finite()) {
            return bad("multiplier must be finite and >= 1");
        }
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return bad("jitter_fraction must be in [0, 1)");
        }
        if self.max_delay < self.base_delay {
            return bad("max_delay must be at least base_delay");
        }
        Ok(())
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReliabilityError {
    #[error("attempt {attempt} exceeds max_retries {max_retries}")]
    AttemptsExhausted { attempt: u32, max_retries: u32 },
    #[error("invalid retry policy: {0}")]
    InvalidPolicy(String),
}

/// Backoff before retry number `attempt + 1`.
///
/// `min(base * multiplier^attempt, max_delay) * (1 + u)` with `u` drawn uniformly from
/// `[-jitter, +jitter]` by a generator seeded from `seed` and `attempt`.
pub fn next_delay(policy: &RetryPolicy, attempt: u32, seed: u64) -> Result<Duration, ReliabilityError> {
    if attempt > policy.max_retries {
        return Err(ReliabilityError::AttemptsExhausted {
            attempt,
            max_retries: policy.max_retries,
        });
    }
    let nominal = (policy.base_delay.as_secs_f64() * policy.multiplier.powi(attempt as i32))
        .min(policy.max_delay.as_secs_f64());
    let j = policy.jitter_fraction;
    let u = if j > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from(attempt).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.random_range(-j..=j)
    } else {
        0.0
    };
    Ok(Duration::from_secs_f64(nominal * (1.0 + u)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseClass {
    Proceed,
    RetryAfter(Duration),
    RetryBackoff,
    Fail(String),
}

/// Maps a response to the action the retry loop takes.
pub fn classify_response(resp: &HttpResponseData, policy: &RetryPolicy) -> ResponseClass {
    let status = resp.status();
    if (200..400).contains(&status) {
        return ResponseClass::Proceed;
    }
    if policy.retryable_statuses.contains(&status) {
        return match resp.get_header("retry-after").and_then(parse_delta_seconds) {
            Some(secs) => ResponseClass::RetryAfter(Duration::from_secs(secs)),
            None => ResponseClass::RetryBackoff,
        };
    }
    match status {
        400..=499 => ResponseClass::Fail(format!("client error {status}")),
        500..=599 => ResponseClass::Fail(format!("server error {status}")),
        _ => ResponseClass::Fail(format!("unexpected status {status}")),
    }
}

/// Only the delta-seconds form; HTTP dates yield `None`.
fn parse_delta_seconds(raw: &str) -> Option<u64> {
    let raw = raw.trim();
    if raw.is_empty() || !raw.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    raw.parse().ok()
}

/// Per-endpoint cooldown deadlines shared by every worker in the process.
#[derive(Debug, Default)]
pub struct BackpressureGate {
    cooldowns: Mutex<HashMap<Endpoint, Instant>>,
}

impl BackpressureGate {
    pub fn new() -> Self {
        Self::default()
    }

    /// Moves the endpoint's deadline to `until` unless it is already later.
    /// Returns the deadline in effect.
    pub fn extend(&self, endpoint: &Endpoint, until: Instant) -> Instant {
        let mut map = self.cooldowns.lock().unwrap();
        let slot = map.entry(endpoint.clone()).or_insert(until);
        if until > *slot {
            *slot = until;
        }
        *slot
    }

    pub fn cooldown_until(&self, endpoint: &Endpoint) -> Option<Instant> {
        self.cooldowns.lock().unwrap().get(endpoint).copied()
    }

    /// Time left in the endpoint's cooldown, if one is active at `now`.
    pub fn remaining(&self, endpoint: &Endpoint, now: Instant) -> Option<Duration> {
        self.cooldown_until(endpoint)
            .filter(|until| *until > now)
            .map(|until| until - now)
    }

    /// Waits until the endpoint is open.
    pub async fn wait_open(&self, endpoint: &Endpoint, clock: &dyn Clock) {
        while let Some(left) = self.remaining(endpoint, clock.now()) {
            clock.sleep(left).await;
        }
    }
}

/// What the final attempt ran into.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LastError {
    Status(u16),
    Transport(TransportError),
}

impl std::fmt::Display for LastError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LastError::Status(s) => write!(f, "status {s}"),
            LastError::Transport(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SendError {
    #[error("gave up after {attempts} attempts, last: {last}")]
    AttemptsExhausted { attempts: u32, last: LastError },
    #[error("client error {status} after {attempts} attempts")]
    ClientError { status: u16, attempts: u32 },
    #[error("non-retryable status {status} after {attempts} attempts")]
    NonRetryable { status: u16, attempts: u32 },
    #[error("{error} after {attempts} attempts (transport retries disabled)")]
    Transport { error: TransportError, attempts: u32 },
}

impl SendError {
    pub fn attempts(&self) -> u32 {
        match self {
            SendError::AttemptsExhausted { attempts, .. }
            | SendError::ClientError { attempts, .. }
            | SendError::NonRetryable { attempts, .. }
            | SendError::Transport { attempts, .. } => *attempts,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivered {
    pub response: HttpResponseData,
    pub attempts: u32,
}

/// Everything a send needs besides the request and policy.
#[derive(Clone)]
pub struct SendContext {
    pub transport: Arc<dyn Transport>,
    pub gate: Arc<BackpressureGate>,
    pub clock: Arc<dyn Clock>,
    pub metrics: Option<Arc<Metrics>>,
    /// Per-attempt deadline; expiry counts as a transport error.
    pub timeout: Option<Duration>,
}

impl SendContext {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        SendContext {
            transport,
            gate: Arc::new(BackpressureGate::new()),
            clock: Arc::new(TokioClock),
            metrics: None,
            timeout: None,
        }
    }
}

async fn attempt_once(req: &HttpRequestData, ctx: &SendContext) -> Result<HttpResponseData, TransportError> {
    let send = ctx.transport.send(req);
    let result = match ctx.timeout {
        None => send.await,
        Some(t) => {
            tokio::select! {
                r = send => r,
                _ = ctx.clock.sleep(t) => Err(TransportError::Timeout),
            }
        }
    };
    if let Some(m) = &ctx.metrics {
        match &result {
            Ok(resp) => m.record_response(resp.status(), resp.latency()),
            Err(_) => m.record_transport_error(),
        }
    }
    result
}

/// Sends `req`, honouring endpoint cooldowns and retrying per `policy`.
///
/// At most `max_retries + 1` attempts leave the client. `seed` makes the
/// jitter of the backoff schedule reproducible.
pub async fn send_with_policy(
    req: &HttpRequestData,
    policy: &RetryPolicy,
    ctx: &SendContext,
    seed: u64,
) -> Result<Delivered, SendError> {
    let endpoint = req.endpoint();
    let max_attempts = policy.max_retries + 1;
    let mut attempts = 0u32;
    loop {
        ctx.gate.wait_open(&endpoint, ctx.clock.as_ref()).await;
        let attempt_idx = attempts;
        attempts += 1;
        let last = match attempt_once(req, ctx).await {
            Ok(response) => match classify_response(&response, policy) {
                ResponseClass::Proceed => return Ok(Delivered { response, attempts }),
                ResponseClass::Fail(_) => {
                    let status = response.status();
                    return Err(if (400..500).contains(&status) {
                        SendError::ClientError { status, attempts }
                    } else {
                        SendError::NonRetryable { status, attempts }
                    });
                }
                ResponseClass::RetryAfter(d) => {
                    ctx.gate.extend(&endpoint, ctx.clock.now() + d);
                    if attempts >= max_attempts {
                        return Err(SendError::AttemptsExhausted {
                            attempts,
                            last: LastError::Status(response.status()),
                        });
                    }
                    // the gate wait at the top of the loop covers the delay
                    if let Some(m) = &ctx.metrics {
                        m.record_retry();
                    }
                    continue;
                }
                ResponseClass::RetryBackoff => LastError::Status(response.status()),
            },
            Err(error) if !policy.retry_on_transport_error => {
                return Err(SendError::Transport { error, attempts });
            }
            Err(error) => LastError::Transport(error),
        };
        if attempts >= max_attempts {
            return Err(SendError::AttemptsExhausted { attempts, last });
        }
        if let Some(m) = &ctx.metrics {
            m.record_retry();
        }
        let delay = next_delay(policy, attempt_idx, seed).expect("attempt within budget");
        ctx.clock.sleep(delay).await;
    }
}
