//! A local fleet of mock services.
//!
//! One process serves every service route with deterministic semantics (see
//! [`semantics`]), plus configurable latency, token-bucket rate limiting that
//! answers `429` with `Retry-After`, and seeded fault injection. All
//! randomness derives from the configured seed and the request's sequence
//! number, so equal seeds and equal request sequences behave identically.
//!
//! Besides the service routes the server exposes `GET /health`,
//! `GET /__log` (the request log as JSON) and `POST /__reset`.

mod bucket;
pub mod semantics;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tokio::time::Instant;

pub use bucket::{RateLimit, TokenBucket};

use crate::services::ServiceKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyModel {
    Constant { ms: f64 },
    Exponential { mean_ms: f64 },
    /// Per-route models; routes not listed answer immediately.
    PerEndpoint(BTreeMap<String, LatencyModel>),
}

impl LatencyModel {
    fn draw(&self, path: &str, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            LatencyModel::Constant { ms } => *ms,
            LatencyModel::Exponential { mean_ms } if *mean_ms > 0.0 => {
                Exp::new(1.0 / mean_ms).map(|d| d.sample(rng)).unwrap_or(0.0)
            }
            LatencyModel::Exponential { .. } => 0.0,
            LatencyModel::PerEndpoint(routes) => routes.get(path).map_or(0.0, |m| m.draw(path, rng)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    /// `0` picks a free port.
    pub port: u16,
    pub latency: LatencyModel,
    pub rate_limit: Option<RateLimit>,
    /// Probability that a request is answered with an injected `500`.
    pub fail_prob: f64,
    pub seed: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            port: 0,
            latency: LatencyModel::Constant { ms: 0.0 },
            rate_limit: None,
            fail_prob: 0.0,
            seed: 7,
        }
    }
}

impl ServerConfig {
    pub fn with_latency_ms(ms: f64) -> Self {
        ServerConfig {
            latency: LatencyModel::Constant { ms },
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Served,
    RateLimited,
    InjectedFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLogEntry {
    pub seq: u64,
    /// Milliseconds since server start (or last reset) when the request was admitted or rejected.
    pub arrival_ms: f64,
    pub path: String,
    pub body: String,
    pub decision: Decision,
    pub service_latency_ms: f64,
    /// Response status; `None` while the request is still being served.
    pub status: Option<u16>,
    /// Time from arrival to response, once known.
    pub hold_ms: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum MockError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("log request failed: {0}")]
    Client(String),
}

struct Inner {
    epoch: Instant,
    seq: u64,
    bucket: Option<TokenBucket>,
    log: Vec<RequestLogEntry>,
}

struct Shared {
    cfg: ServerConfig,
    inner: Mutex<Inner>,
}

impl Shared {
    fn reset(&self) {
        let mut inner = self.inner.lock().unwrap();
        inner.epoch = Instant::now();
        inner.seq = 0;
        inner.log.clear();
        inner.bucket = self
            .cfg
            .rate_limit
            .as_ref()
            .map(|r| TokenBucket::new(r.capacity, r.refill_per_sec));
    }

    /// Assigns a sequence number and decides the request's fate atomically.
    fn admit(&self, path: &str, body: &[u8]) -> (u64, Decision, f64, Instant) {
        let mut inner = self.inner.lock().unwrap();
        inner.seq += 1;
        let seq = inner.seq;
        let arrived = Instant::now();
        let since_epoch = arrived - inner.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ seq.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let fail_draw: f64 = rng.random();
        let latency = self.cfg.latency.draw(path, &mut rng);
        let admitted = inner.bucket.as_mut().is_none_or(|b| b.admit(since_epoch));
        let decision = match admitted {
            false => Decision::RateLimited,
            true if fail_draw < self.cfg.fail_prob => Decision::InjectedFailure,
            true => Decision::Served,
        };
        let service_latency_ms = if decision == Decision::Served { latency } else { 0.0 };
        inner.log.push(RequestLogEntry {
            seq,
            arrival_ms: since_epoch.as_secs_f64() * 1000.0,
            path: path.to_owned(),
            body: String::from_utf8_lossy(body).into_owned(),
            decision,
            service_latency_ms,
            status: None,
            hold_ms: None,
        });
        (seq, decision, service_latency_ms, arrived)
    }

    fn complete(&self, seq: u64, status: u16, arrived: Instant) {
        let hold = arrived.elapsed().as_secs_f64() * 1000.0;
        let mut inner = self.inner.lock().unwrap();
        if let Some(entry) = inner.log.iter_mut().rev().find(|e| e.seq == seq) {
            entry.status = Some(status);
            entry.hold_ms = Some(hold);
        }
    }
}

/// A running mock server.
pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn config(&self) -> &ServerConfig {
        &self.shared.cfg
    }

    /// Snapshot of the request log, in sequence order.
    pub fn log(&self) -> Vec<RequestLogEntry> {
        self.shared.inner.lock().unwrap().log.clone()
    }

    /// Clears the log, sequence counter and rate-limit state.
    pub fn reset(&self) {
        self.shared.reset();
    }

    /// Stops accepting connections and waits for the server task to finish.
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

/// Binds `127.0.0.1:cfg.port` and starts serving on the current runtime.
pub async fn serve(cfg: ServerConfig) -> Result<MockServer, MockError> {
    if !(0.0..1.0).contains(&cfg.fail_prob) {
        return Err(MockError::InvalidConfig("fail_prob must be in [0, 1)".into()));
    }
    if let Some(r) = &cfg.rate_limit {
        if r.capacity == 0 || !(r.refill_per_sec > 0.0) {
            return Err(MockError::InvalidConfig("rate limit needs capacity >= 1 and positive refill".into()));
        }
    }
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", cfg.port))
        .await
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => MockError::PortInUse(cfg.port),
            _ => MockError::Io(e),
        })?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        cfg,
        inner: Mutex::new(Inner {
            epoch: Instant::now(),
            seq: 0,
            bucket: None,
            log: Vec::new(),
        }),
    });
    shared.reset();

    let app = Router::new().fallback(dispatch).with_state(shared.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let server = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = rx.await;
        });
        if let Err(e) = server.await {
            tracing::error!("mock server stopped: {e}");
        }
    });
    Ok(MockServer {
        addr,
        shared,
        shutdown: Some(tx),
        task: Some(task),
    })
}

fn json_response(status: StatusCode, body: serde_json::Value) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body.to_string()).into_response()
}

async fn dispatch(State(shared): State<Arc<Shared>>, method: Method, uri: Uri, body: Bytes) -> Response {
    let path = uri.path();
    match (&method, path) {
        (&Method::GET, "/health") => return json_response(StatusCode::OK, json!({"status": "ok"})),
        (&Method::GET, "/__log") => {
            let log = shared.inner.lock().unwrap().log.clone();
            return json_response(StatusCode::OK, serde_json::to_value(log).expect("log serializes"));
        }
        (&Method::POST, "/__reset") => {
            shared.reset();
            return json_response(StatusCode::OK, json!({"status": "reset"}));
        }
        _ => {}
    }
    let Some(kind) = ServiceKind::from_path(path) else {
        return json_response(StatusCode::NOT_FOUND, json!({"error": format!("no route {path}")}));
    };
    if method != Method::POST {
        return json_response(StatusCode::METHOD_NOT_ALLOWED, json!({"error": "use POST"}));
    }

    let (seq, decision, latency_ms, arrived) = shared.admit(path, &body);
    let response = match decision {
        Decision::RateLimited => {
            let secs = shared.cfg.rate_limit.as_ref().map_or(1, |r| r.retry_after_secs);
            let mut resp = json_response(StatusCode::TOO_MANY_REQUESTS, json!({"error": "rate limited"}));
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(secs));
            resp
        }
        Decision::InjectedFailure => {
            json_response(StatusCode::INTERNAL_SERVER_ERROR, json!({"error": "injected failure"}))
        }
        Decision::Served => {
            if latency_ms > 0.0 {
                tokio::time::sleep_until(arrived + Duration::from_secs_f64(latency_ms / 1000.0)).await;
            }
            match semantics::handle_service(kind, &body) {
                Ok(out) => json_response(StatusCode::OK, out),
                Err((status, msg)) => json_response(
                    StatusCode::from_u16(status).unwrap_or(StatusCode::BAD_REQUEST),
                    json!({"error": msg}),
                ),
            }
        }
    };
    shared.complete(seq, response.status().as_u16(), arrived);
    response
}

/// Fetches `GET /__log` from a running server.
pub async fn fetch_log(base_url: &str) -> Result<Vec<RequestLogEntry>, MockError> {
    let url = format!("{}/__log", base_url.trim_end_matches('/'));
    let resp = reqwest::get(&url).await.map_err(|e| MockError::Client(e.to_string()))?;
    let bytes = resp.bytes().await.map_err(|e| MockError::Client(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| MockError::Client(e.to_string()))
}

/// Sends `POST /__reset` to a running server.
pub async fn reset_remote(base_url: &str) -> Result<(), MockError> {
    let url = format!("{}/__reset", base_url.trim_end_matches('/'));
    reqwest::Client::new()
        .post(&url)
        .send()
        .await
        .map_err(|e| MockError::Client(e.to_string()))?;
    Ok(())
}
