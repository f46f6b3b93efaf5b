//! HTTP requests and responses as structured, validated values.
//!
//! Both message types convert to and from [`Value::Map`] so they can be
//! stored in table columns and read back unchanged.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use url::Url;

use crate::table::{DepthExceeded, Value};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HttpError {
    #[error("invalid url `{0}`")]
    InvalidUrl(String),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("{0} requests cannot carry an entity")]
    EntityOnBodylessMethod(Method),
    #[error("invalid status code {0}")]
    InvalidStatus(u16),
    #[error("malformed message value: {0}")]
    MalformedValue(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EntityError {
    #[error("response has no entity")]
    NoEntity,
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error(transparent)]
    DepthExceeded(#[from] DepthExceeded),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Get,
    Post,
    Put,
    Delete,
    Head,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Put => "PUT",
            Method::Delete => "DELETE",
            Method::Head => "HEAD",
        }
    }

    fn allows_entity(self) -> bool {
        !matches!(self, Method::Get | Method::Head)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = HttpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "GET" => Method::Get,
            "POST" => Method::Post,
            "PUT" => Method::Put,
            "DELETE" => Method::Delete,
            "HEAD" => Method::Head,
            other => return Err(HttpError::MalformedValue(format!("unknown method `{other}`"))),
        })
    }
}

/// A message body with its media type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub content_type: String,
    pub body: Vec<u8>,
}

impl Entity {
    pub fn new(content_type: impl Into<String>, body: impl Into<Vec<u8>>) -> Self {
        Entity {
            content_type: content_type.into(),
            body: body.into(),
        }
    }

    pub fn json(body: &serde_json::Value) -> Self {
        Entity::new("application/json", serde_json::to_vec(body).expect("JSON values serialize"))
    }
}

/// Host and port of a URL; the granularity of backpressure state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

pub type Headers = Vec<(String, String)>;

/// Header lookup shared by requests and responses.
pub trait HttpMessage {
    fn headers(&self) -> &[(String, String)];

    /// First header whose name matches case-insensitively.
    fn get_header(&self, name: &str) -> Option<&str> {
        self.headers()
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpRequestData {
    method: Method,
    url: Url,
    headers: Headers,
    entity: Option<Entity>,
}

impl HttpRequestData {
    /// Validates and builds a request. Header order is preserved.
    pub fn new(method: Method, url: &str, headers: Headers, entity: Option<Entity>) -> Result<Self, HttpError> {
        let url = parse_url(url)?;
        for (name, value) in &headers {
            validate_header(name, value)?;
        }
        if entity.is_some() && !method.allows_entity() {
            return Err(HttpError::EntityOnBodylessMethod(method));
        }
        Ok(HttpRequestData {
            method,
            url,
            headers,
            entity,
        })
    }

    /// A JSON `POST` with `Content-Type: application/json` first in the header list.
    pub fn post_json(url: &str, body: &serde_json::Value, mut headers: Headers) -> Result<Self, HttpError> {
        headers.insert(0, ("Content-Type".into(), "application/json".into()));
        Self::new(Method::Post, url, headers, Some(Entity::json(body)))
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn url(&self) -> &Url {
        &self.url
    }

    pub fn entity(&self) -> Option<&Entity> {
        self.entity.as_ref()
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint {
            host: self.url.host_str().unwrap_or_default().to_owned(),
            port: self.url.port_or_known_default().unwrap_or(80),
        }
    }

    pub fn to_value(&self) -> Value {
        Value::map([
            ("method", Value::from(self.method.as_str())),
            ("url", Value::from(self.url.as_str())),
            ("headers", headers_to_value(&self.headers)),
            ("entity", entity_to_value(self.entity.as_ref())),
        ])
    }

    pub fn from_value(value: &Value) -> Result<Self, HttpError> {
        let method = text_field(value, "method")?.parse()?;
        let url = text_field(value, "url")?;
        let headers = headers_from_value(value.get("headers"))?;
        let entity = entity_from_value(value.get("entity"))?;
        Self::new(method, url, headers, entity)
    }
}

impl HttpMessage for HttpRequestData {
    fn headers(&self) -> &[(String, String)] {
        &self.headers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponseData {
    status: u16,
    reason: String,
    headers: Headers,
    entity: Option<Entity>,
    latency: Duration,
}

impl HttpResponseData {
    pub fn new(
        status: u16,
        reason: impl Into<String>,
        headers: Headers,
        entity: Option<Entity>,
        latency: Duration,
    ) -> Result<Self, HttpError> {
        if !(100..=599).contains(&status) {
            return Err(HttpError::InvalidStatus(status));
        }
        for (name, value) in &headers {
            validate_header(name, value)?;
        }
        Ok(HttpResponseData {
            status,
            reason: reason.into(),
            headers,
            entity,
            latency,
        })
    }

    pub fn status(&self) -> u16 {
        self.status
    }

    pub fn reason(&self) -> &str {
        &self.reason
    }

    pub fn entity(&self) -> Option<&Entity> {
        self.entity.as_ref()
    }

    /// Client-measured time from send to full response.
    pub fn latency(&self) -> Duration {
        self.latency
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn to_value(&self) -> Value {
        Value::map([
            ("status", Value::Int(i64::from(self.status))),
            ("reason", Value::from(self.reason.as_str())),
            ("headers", headers_to_value(&self.headers)),
            ("entity", entity_to_value(self.entity.as_ref())),
            ("latency_ms", Value::Float(self.latency.as_secs_f64() * 1000.0)),
        ])
    }

    pub fn from_value(value: &Value) -> Result<Self, HttpError> {
        let status = value
            .get("status")
            .and_then(Value::as_i64)
            .and_then(|s| u16::try_from(s).ok())
            .ok_or_else(|| HttpError::MalformedValue("status".into()))?;
        let latency_ms = value
            .get("latency_ms")
            .and_then(Value::as_f64)
            .filter(|l| *l >= 0.0 && l.is_finite())
            .ok_or_else(|| HttpError::MalformedValue("latency_ms".into()))?;
        Self::new(
            status,
            text_field(value, "reason")?,
            headers_from_value(value.get("headers"))?,
            entity_from_value(value.get("entity"))?,
            Duration::from_secs_f64(latency_ms / 1000.0),
        )
    }
}

impl HttpMessage for HttpResponseData {
    fn headers(&self) -> &[(String, String)] {
        &self.headers
    }
}

/// Decodes a response body as JSON into a [`Value`].
pub fn parse_json_entity(resp: &HttpResponseData) -> Result<Value, EntityError> {
    let entity = resp.entity().ok_or(EntityError::NoEntity)?;
    parse_json_bytes(&entity.body)
}

pub(crate) fn parse_json_bytes(body: &[u8]) -> Result<Value, EntityError> {
    let text = std::str::from_utf8(body).map_err(|e| EntityError::MalformedJson(e.to_string()))?;
    let json: serde_json::Value = serde_json::from_str(text).map_err(|e| {
        if e.to_string().contains("recursion limit") {
            EntityError::DepthExceeded(DepthExceeded)
        } else {
            EntityError::MalformedJson(e.to_string())
        }
    })?;
    Ok(Value::from_json(&json)?)
}

fn parse_url(raw: &str) -> Result<Url, HttpError> {
    let url = Url::parse(raw).map_err(|_| HttpError::InvalidUrl(raw.to_owned()))?;
    if !matches!(url.scheme(), "http" | "https") || url.host_str().is_none_or(str::is_empty) {
        return Err(HttpError::InvalidUrl(raw.to_owned()));
    }
    Ok(url)
}

fn validate_header(name: &str, value: &str) -> Result<(), HttpError> {
    if name.is_empty() || name.chars().any(|c| c.is_control() || c == ':' || c == ' ') {
        return Err(HttpError::InvalidHeader(format!("bad name {name:?}")));
    }
    if value.chars().any(|c| c == '\r' || c == '\n' || c == '\0') {
        return Err(HttpError::InvalidHeader(format!("bad value for {name}")));
    }
    Ok(())
}

fn headers_to_value(headers: &[(String, String)]) -> Value {
    Value::List(
        headers
            .iter()
            .map(|(n, v)| Value::List(vec![Value::from(n.as_str()), Value::from(v.as_str())]))
            .collect(),
    )
}

fn headers_from_value(value: Option<&Value>) -> Result<Headers, HttpError> {
    let bad = || HttpError::MalformedValue("headers".into());
    let items = value.and_then(Value::as_list).ok_or_else(bad)?;
    items
        .iter()
        .map(|pair| match pair.as_list() {
            Some([Value::Text(n), Value::Text(v)]) => Ok((n.clone(), v.clone())),
            _ => Err(bad()),
        })
        .collect()
}

fn entity_to_value(entity: Option<&Entity>) -> Value {
    match entity {
        None => Value::Null,
        Some(e) => Value::map([
            ("content_type", Value::from(e.content_type.as_str())),
            ("body", Value::Bytes(e.body.clone())),
        ]),
    }
}

fn entity_from_value(value: Option<&Value>) -> Result<Option<Entity>, HttpError> {
    match value {
        None | Some(Value::Null) => Ok(None),
        Some(v) => {
            let content_type = text_field(v, "content_type")?;
            match v.get("body") {
                Some(Value::Bytes(b)) => Ok(Some(Entity::new(content_type, b.clone()))),
                _ => Err(HttpError::MalformedValue("entity.body".into())),
            }
        }
    }
}

fn text_field<'a>(value: &'a Value, key: &str) -> Result<&'a str, HttpError> {
    value
        .get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| HttpError::MalformedValue(key.into()))
}
