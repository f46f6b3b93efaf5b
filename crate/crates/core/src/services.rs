//! Request builders and response parsers for the supported services.
//!
//! Text services share one envelope: a request carries
//! `{"documents": [{"id", "language"?, "text"}]}` and the response echoes
//! the ids in `documents` (successes) and `errors` (per-document failures).
//! Image services send one base64 image per request. Anomaly detection sends
//! one series per request.
//!
//! Every builder targets `base_url + path`. Pointing the same client at a
//! local mock or at a compatible remote endpoint only changes `base_url`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use base64::Engine as _;
use chrono::{DateTime, Duration as ChronoDuration, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::http::{parse_json_entity, EntityError, HttpError, HttpRequestData, HttpResponseData};
use crate::table::Value;

/// Header carrying the subscription key.
pub const API_KEY_HEADER: &str = "Ocp-Apim-Subscription-Key";

/// Maximum documents per request for text services.
pub const TEXT_MAX_BATCH: usize = 10;

/// Resolved parameter values for one row.
pub type Params = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Sentiment,
    LanguageDetect,
    KeyPhrase,
    NamedEntity,
    Ocr,
    TagImage,
    AnomalyDetect,
}

/// Static description of a service's request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceRequestSpec {
    pub path: &'static str,
    pub payload_schema: &'static str,
    pub required: &'static [&'static str],
    pub optional: &'static [&'static str],
}

impl ServiceKind {
    pub const ALL: [ServiceKind; 7] = [
        ServiceKind::Sentiment,
        ServiceKind::LanguageDetect,
        ServiceKind::KeyPhrase,
        ServiceKind::NamedEntity,
        ServiceKind::Ocr,
        ServiceKind::TagImage,
        ServiceKind::AnomalyDetect,
    ];

    pub fn spec(self) -> ServiceRequestSpec {
        const TEXT: &[&str] = &["text"];
        const LANG: &[&str] = &["language"];
        match self {
            ServiceKind::Sentiment => ServiceRequestSpec {
                path: "/text/sentiment",
                payload_schema: "text-documents",
                required: TEXT,
                optional: LANG,
            },
            ServiceKind::LanguageDetect => ServiceRequestSpec {
                path: "/text/language",
                payload_schema: "text-documents",
                required: TEXT,
                optional: &[],
            },
            ServiceKind::KeyPhrase => ServiceRequestSpec {
                path: "/text/keyPhrases",
                payload_schema: "text-documents",
                required: TEXT,
                optional: LANG,
            },
            ServiceKind::NamedEntity => ServiceRequestSpec {
                path: "/text/entities",
                payload_schema: "text-documents",
                required: TEXT,
                optional: LANG,
            },
            ServiceKind::Ocr => ServiceRequestSpec {
                path: "/vision/ocr",
                payload_schema: "image",
                required: &["image"],
                optional: &[],
            },
            ServiceKind::TagImage => ServiceRequestSpec {
                path: "/vision/tag",
                payload_schema: "image",
                required: &["image"],
                optional: &[],
            },
            ServiceKind::AnomalyDetect => ServiceRequestSpec {
                path: "/anomaly/detect",
                payload_schema: "series",
                required: &["series"],
                optional: &["granularity"],
            },
        }
    }

    pub fn path(self) -> &'static str {
        self.spec().path
    }

    pub fn is_text(self) -> bool {
        matches!(
            self,
            ServiceKind::Sentiment | ServiceKind::LanguageDetect | ServiceKind::KeyPhrase | ServiceKind::NamedEntity
        )
    }

    pub fn max_batch(self) -> usize {
        if self.is_text() {
            TEXT_MAX_BATCH
        } else {
            1
        }
    }

    pub fn accepts_param(self, name: &str) -> bool {
        let spec = self.spec();
        spec.required.contains(&name) || spec.optional.contains(&name)
    }

    pub fn from_path(path: &str) -> Option<ServiceKind> {
        ServiceKind::ALL.into_iter().find(|k| k.path() == path)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ServiceKind::Sentiment => "sentiment",
            ServiceKind::LanguageDetect => "language_detect",
            ServiceKind::KeyPhrase => "key_phrase",
            ServiceKind::NamedEntity => "named_entity",
            ServiceKind::Ocr => "ocr",
            ServiceKind::TagImage => "tag_image",
            ServiceKind::AnomalyDetect => "anomaly_detect",
        }
    }
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ServiceKind {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Ok(match norm.as_str() {
            "sentiment" => ServiceKind::Sentiment,
            "language" | "language_detect" | "ld" => ServiceKind::LanguageDetect,
            "key_phrase" | "keyphrases" | "key_phrases" | "kp" => ServiceKind::KeyPhrase,
            "named_entity" | "entities" | "ner" => ServiceKind::NamedEntity,
            "ocr" => ServiceKind::Ocr,
            "tag_image" | "tag" | "tagimage" => ServiceKind::TagImage,
            "anomaly_detect" | "anomaly" => ServiceKind::AnomalyDetect,
            _ => return Err(ServiceError::UnknownService(s.to_owned())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("{kind} accepts at most {max} item(s) per request, got {got}")]
    BatchTooLarge { kind: ServiceKind, max: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("missing required parameter `{0}`")]
    MissingRequiredParameter(String),
    #[error("parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("unexpected status {0}")]
    UnexpectedStatus(u16),
    #[error(transparent)]
    Entity(#[from] EntityError),
    #[error("response violates schema: {0}")]
    SchemaViolation(String),
}

fn required<'a>(params: &'a Params, name: &str) -> Result<&'a Value, ServiceError> {
    match params.get(name) {
        None | Some(Value::Null) => Err(ServiceError::MissingRequiredParameter(name.to_owned())),
        Some(v) => Ok(v),
    }
}

fn text_param<'a>(params: &'a Params, name: &str) -> Result<&'a str, ServiceError> {
    required(params, name)?
        .as_str()
        .ok_or_else(|| ServiceError::InvalidParameter {
            name: name.to_owned(),
            reason: "expected text".into(),
        })
}

fn optional_text<'a>(params: &'a Params, name: &str) -> Result<Option<&'a str>, ServiceError> {
    match params.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(_) => text_param(params, name).map(Some),
    }
}

fn image_bytes(params: &Params) -> Result<&[u8], ServiceError> {
    match required(params, "image")? {
        Value::Bytes(b) => Ok(b),
        Value::Text(s) => Ok(s.as_bytes()),
        _ => Err(ServiceError::InvalidParameter {
            name: "image".into(),
            reason: "expected bytes".into(),
        }),
    }
}

/// Start of synthetic timestamps for bare-number series.
fn series_origin() -> DateTime<Utc> {
    DateTime::from_timestamp(1_577_836_800, 0).expect("valid epoch") // 2020-01-01T00:00:00Z
}

fn granularity_step(granularity: &str) -> ChronoDuration {
    match granularity {
        "minutely" => ChronoDuration::minutes(1),
        "daily" => ChronoDuration::days(1),
        _ => ChronoDuration::hours(1),
    }
}

fn series_json(params: &Params, granularity: &str) -> Result<serde_json::Value, ServiceError> {
    let bad = |reason: &str| ServiceError::InvalidParameter {
        name: "series".into(),
        reason: reason.into(),
    };
    let points = required(params, "series")?.as_list().ok_or_else(|| bad("expected a list"))?;
    let step = granularity_step(granularity);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (timestamp, value) = match p {
                Value::Map(m) => {
                    let ts = m.get("timestamp").and_then(Value::as_str).ok_or_else(|| bad("point without timestamp"))?;
                    let v = m.get("value").and_then(Value::as_f64).ok_or_else(|| bad("point without numeric value"))?;
                    (ts.to_owned(), v)
                }
                other => {
                    let v = other.as_f64().ok_or_else(|| bad("points must be numbers or {timestamp, value}"))?;
                    let ts = series_origin() + step * i as i32;
                    (ts.to_rfc3339_opts(SecondsFormat::Secs, true), v)
                }
            };
            if !value.is_finite() {
                return Err(bad("non-finite value"));
            }
            Ok(json!({"timestamp": timestamp, "value": value}))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(serde_json::Value::Array)
}

/// The JSON body for `batch` without building a request.
pub fn request_body(kind: ServiceKind, batch: &[Params]) -> Result<serde_json::Value, ServiceError> {
    if batch.is_empty() {
        return Err(ServiceError::EmptyBatch);
    }
    if batch.len() > kind.max_batch() {
        return Err(ServiceError::BatchTooLarge {
            kind,
            max: kind.max_batch(),
            got: batch.len(),
        });
    }
    Ok(match kind {
        ServiceKind::LanguageDetect => {
            let docs = batch
                .iter()
                .enumerate()
                .map(|(i, p)| Ok(json!({"id": i.to_string(), "text": text_param(p, "text")?})))
                .collect::<Result<Vec<_>, ServiceError>>()?;
            json!({ "documents": docs })
        }
        ServiceKind::Sentiment | ServiceKind::KeyPhrase | ServiceKind::NamedEntity => {
            let docs = batch
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let text = text_param(p, "text")?;
                    let language = optional_text(p, "language")?.unwrap_or("en");
                    Ok(json!({"id": i.to_string(), "language": language, "text": text}))
                })
                .collect::<Result<Vec<_>, ServiceError>>()?;
            json!({ "documents": docs })
        }
        ServiceKind::Ocr | ServiceKind::TagImage => {
            let image = base64::engine::general_purpose::STANDARD.encode(image_bytes(&batch[0])?);
            json!({ "image": image })
        }
        ServiceKind::AnomalyDetect => {
            let granularity = optional_text(&batch[0], "granularity")?.unwrap_or("hourly");
            json!({"series": series_json(&batch[0], granularity)?, "granularity": granularity})
        }
    })
}

/// Builds the `POST` for one batch of resolved parameters.
pub fn build_service_request(
    kind: ServiceKind,
    batch: &[Params],
    base_url: &str,
    api_key: Option<&str>,
) -> Result<HttpRequestData, ServiceError> {
    let body = request_body(kind, batch)?;
    let url = format!("{}{}", base_url.trim_end_matches('/'), kind.path());
    let headers = api_key
        .map(|k| vec![(API_KEY_HEADER.to_owned(), k.to_owned())])
        .unwrap_or_default();
    Ok(HttpRequestData::post_json(&url, &body, headers)?)
}

fn violation(msg: impl Into<String>) -> ServiceError {
    ServiceError::SchemaViolation(msg.into())
}

fn check_number(v: Option<&Value>, what: &str) -> Result<(), ServiceError> {
    v.and_then(Value::as_f64).map(|_| ()).ok_or_else(|| violation(format!("{what} must be a number")))
}

fn check_document(kind: ServiceKind, doc: &Value) -> Result<(), ServiceError> {
    match kind {
        ServiceKind::Sentiment => {
            let label = doc.get("sentiment").and_then(Value::as_str);
            if !matches!(label, Some("positive" | "neutral" | "negative")) {
                return Err(violation("sentiment label"));
            }
            let scores = doc.get("confidenceScores").ok_or_else(|| violation("confidenceScores"))?;
            for k in ["positive", "neutral", "negative"] {
                check_number(scores.get(k), "confidence score")?;
            }
        }
        ServiceKind::LanguageDetect => {
            let d = doc.get("detectedLanguage").ok_or_else(|| violation("detectedLanguage"))?;
            d.get("iso6391Name").and_then(Value::as_str).ok_or_else(|| violation("iso6391Name"))?;
            check_number(d.get("confidenceScore"), "confidenceScore")?;
        }
        ServiceKind::KeyPhrase => {
            let phrases = doc.get("keyPhrases").and_then(Value::as_list).ok_or_else(|| violation("keyPhrases"))?;
            if phrases.iter().any(|p| p.as_str().is_none()) {
                return Err(violation("keyPhrases must be text"));
            }
        }
        ServiceKind::NamedEntity => {
            let ents = doc.get("entities").and_then(Value::as_list).ok_or_else(|| violation("entities"))?;
            for e in ents {
                e.get("text").and_then(Value::as_str).ok_or_else(|| violation("entity text"))?;
                let cat = e.get("category").and_then(Value::as_str);
                if !matches!(cat, Some("Person" | "Location" | "Organization")) {
                    return Err(violation("entity category"));
                }
                e.get("offset").and_then(Value::as_i64).ok_or_else(|| violation("entity offset"))?;
                e.get("length").and_then(Value::as_i64).ok_or_else(|| violation("entity length"))?;
            }
        }
        _ => unreachable!("document check on non-text service"),
    }
    Ok(())
}

/// Validates a 2xx response against the service's schema.
///
/// Text services yield `{"documents": [...], "errors": [...]}` (a missing
/// `errors` array reads as empty). Other services yield their result object.
pub fn parse_service_response(kind: ServiceKind, resp: &HttpResponseData) -> Result<Value, ServiceError> {
    if !resp.is_success() {
        return Err(ServiceError::UnexpectedStatus(resp.status()));
    }
    let root = parse_json_entity(resp)?;
    if root.as_map().is_none() {
        return Err(violation("response must be an object"));
    }
    match kind {
        k if k.is_text() => {
            let docs = root.get("documents").and_then(Value::as_list).ok_or_else(|| violation("missing documents"))?;
            for doc in docs {
                doc.get("id").and_then(Value::as_str).ok_or_else(|| violation("document without id"))?;
                check_document(kind, doc)?;
            }
            let errors = match root.get("errors") {
                None | Some(Value::Null) => Vec::new(),
                Some(Value::List(errs)) => {
                    for e in errs {
                        e.get("id").and_then(Value::as_str).ok_or_else(|| violation("error without id"))?;
                    }
                    errs.clone()
                }
                Some(_) => return Err(violation("errors must be a list")),
            };
            Ok(Value::map([("documents", Value::List(docs.to_vec())), ("errors", Value::List(errors))]))
        }
        ServiceKind::Ocr => {
            root.get("text").and_then(Value::as_str).ok_or_else(|| violation("missing text"))?;
            Ok(root)
        }
        ServiceKind::TagImage => {
            let tags = root.get("tags").and_then(Value::as_list).ok_or_else(|| violation("missing tags"))?;
            for t in tags {
                t.get("name").and_then(Value::as_str).ok_or_else(|| violation("tag name"))?;
                check_number(t.get("confidence"), "tag confidence")?;
            }
            Ok(root)
        }
        ServiceKind::AnomalyDetect => {
            let flags = root.get("isAnomaly").and_then(Value::as_list).ok_or_else(|| violation("missing isAnomaly"))?;
            if flags.iter().any(|f| f.as_bool().is_none()) {
                return Err(violation("isAnomaly must hold booleans"));
            }
            let expected = root
                .get("expectedValues")
                .and_then(Value::as_list)
                .ok_or_else(|| violation("missing expectedValues"))?;
            if expected.len() != flags.len() || expected.iter().any(|v| v.as_f64().is_none()) {
                return Err(violation("expectedValues must be numbers aligned with isAnomaly"));
            }
            Ok(root)
        }
        _ => unreachable!(),
    }
}

/// Number of points a request for `params` sends; used to cross-check
/// anomaly responses.
pub fn series_len(params: &Params) -> Option<usize> {
    params.get("series").and_then(Value::as_list).map(<[Value]>::len)
}
