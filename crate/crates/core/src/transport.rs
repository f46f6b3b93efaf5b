//! Pluggable request transports.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use tokio::time::Instant;

use crate::http::{Entity, Headers, HttpRequestData, HttpResponseData, Method};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("connect failed: {0}")]
    Connect(String),
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Other(String),
}

/// Sends one request and returns the full response.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn send(&self, req: &HttpRequestData) -> Result<HttpResponseData, TransportError>;
}

#[async_trait]
impl<T: Transport + ?Sized> Transport for Arc<T> {
    async fn send(&self, req: &HttpRequestData) -> Result<HttpResponseData, TransportError> {
        (**self).send(req).await
    }
}

/// HTTP/1.1 over TCP with a pooled keep-alive client.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    client: reqwest::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self::with_connect_timeout(Duration::from_secs(5))
    }

    pub fn with_connect_timeout(connect_timeout: Duration) -> Self {
        let client = reqwest::Client::builder()
            .connect_timeout(connect_timeout)
            .redirect(reqwest::redirect::Policy::none())
            .tcp_nodelay(true)
            .build()
            .expect("client builds without TLS");
        HttpTransport { client }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

fn to_reqwest_method(m: Method) -> reqwest::Method {
    match m {
        Method::Get => reqwest::Method::GET,
        Method::Post => reqwest::Method::POST,
        Method::Put => reqwest::Method::PUT,
        Method::Delete => reqwest::Method::DELETE,
        Method::Head => reqwest::Method::HEAD,
    }
}

fn map_error(e: reqwest::Error) -> TransportError {
    if e.is_timeout() {
        TransportError::Timeout
    } else if e.is_connect() {
        TransportError::Connect(e.to_string())
    } else {
        TransportError::Other(e.to_string())
    }
}

#[async_trait]
impl Transport for HttpTransport {
    async fn send(&self, req: &HttpRequestData) -> Result<HttpResponseData, TransportError> {
        use crate::http::HttpMessage;

        let start = Instant::now();
        let mut builder = self
            .client
            .request(to_reqwest_method(req.method()), req.url().as_str());
        for (name, value) in req.headers() {
            builder = builder.header(name.as_str(), value.as_str());
        }
        if let Some(entity) = req.entity() {
            if req.get_header("content-type").is_none() {
                builder = builder.header("Content-Type", entity.content_type.as_str());
            }
            builder = builder.body(entity.body.clone());
        }
        let resp = builder.send().await.map_err(map_error)?;
        let status = resp.status();
        let headers: Headers = resp
            .headers()
            .iter()
            .filter_map(|(n, v)| Some((n.as_str().to_owned(), v.to_str().ok()?.to_owned())))
            .collect();
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("application/octet-stream")
            .to_owned();
        let body = resp.bytes().await.map_err(map_error)?;
        let entity = (!body.is_empty()).then(|| Entity::new(content_type, body.to_vec()));
        HttpResponseData::new(
            status.as_u16(),
            status.canonical_reason().unwrap_or(""),
            headers,
            entity,
            start.elapsed(),
        )
        .map_err(|e| TransportError::Other(e.to_string()))
    }
}

/// Adds a fixed delay before every request, modelling network distance.
///
/// The reported latency includes the injected delay.
#[derive(Debug, Clone)]
pub struct DelayedTransport<T> {
    inner: T,
    delay: Duration,
}

impl<T> DelayedTransport<T> {
    pub fn new(inner: T, delay: Duration) -> Self {
        DelayedTransport { inner, delay }
    }
}

#[async_trait]
impl<T: Transport> Transport for DelayedTransport<T> {
    async fn send(&self, req: &HttpRequestData) -> Result<HttpResponseData, TransportError> {
        let start = Instant::now();
        tokio::time::sleep(self.delay).await;
        let resp = self.inner.send(req).await?;
        Ok(resp.with_latency(start.elapsed()))
    }
}
