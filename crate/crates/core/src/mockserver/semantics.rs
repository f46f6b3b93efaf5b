//! Closed-form service behaviour of the mock fleet.
//!
//! Every rule here is deliberately simple so a test can recompute the
//! expected answer independently.

use std::hash::Hasher;

use base64::Engine as _;
use serde_json::{json, Value as Json};

use crate::services::{ServiceKind, TEXT_MAX_BATCH};

pub const POSITIVE_WORDS: [&str; 5] = ["good", "great", "excellent", "love", "wonderful"];
pub const NEGATIVE_WORDS: [&str; 5] = ["bad", "terrible", "hate", "awful", "poor"];

pub const TAG_WORDS: [&str; 16] = [
    "painting", "portrait", "landscape", "sculpture", "vase", "textile", "armor", "drawing", "print",
    "photograph", "ceramic", "jewelry", "furniture", "manuscript", "coin", "mask",
];

/// A maximal run of alphanumeric characters; offsets count chars.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    pub text: &'a str,
    pub char_offset: usize,
    pub char_len: usize,
    byte_start: usize,
    byte_end: usize,
}

pub fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let mut current: Option<(usize, usize)> = None; // (byte_start, char_offset)
    let mut char_idx = 0;
    for (byte_idx, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if current.is_none() {
                current = Some((byte_idx, char_idx));
            }
        } else if let Some((bs, co)) = current.take() {
            tokens.push(Token {
                text: &text[bs..byte_idx],
                char_offset: co,
                char_len: char_idx - co,
                byte_start: bs,
                byte_end: byte_idx,
            });
        }
        char_idx += 1;
    }
    if let Some((bs, co)) = current {
        tokens.push(Token {
            text: &text[bs..],
            char_offset: co,
            char_len: char_idx - co,
            byte_start: bs,
            byte_end: text.len(),
        });
    }
    tokens
}

/// Label from the sign of positive minus negative lexicon hits.
pub fn sentiment(text: &str) -> (&'static str, usize, usize) {
    let (mut pos, mut neg) = (0, 0);
    for t in tokenize(text) {
        let w = t.text.to_lowercase();
        if POSITIVE_WORDS.contains(&w.as_str()) {
            pos += 1;
        } else if NEGATIVE_WORDS.contains(&w.as_str()) {
            neg += 1;
        }
    }
    let label = match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => "positive",
        std::cmp::Ordering::Less => "negative",
        std::cmp::Ordering::Equal => "neutral",
    };
    (label, pos, neg)
}

fn sentiment_doc(id: &str, text: &str) -> Json {
    let (label, pos, neg) = sentiment(text);
    let total = (pos + neg + 1) as f64;
    json!({
        "id": id,
        "sentiment": label,
        "confidenceScores": {
            "positive": pos as f64 / total,
            "neutral": 1.0 / total,
            "negative": neg as f64 / total,
        }
    })
}

/// Script-based detection. Kana wins over Han so Japanese text with kanji
/// reads as Japanese; then Hangul, Han, Cyrillic; everything else is English.
pub fn detect_language(text: &str) -> &'static str {
    let has = |lo: u32, hi: u32| text.chars().any(|c| (lo..=hi).contains(&(c as u32)));
    if has(0x3040, 0x309F) || has(0x30A0, 0x30FF) {
        "ja"
    } else if has(0xAC00, 0xD7AF) || has(0x1100, 0x11FF) || has(0x3130, 0x318F) {
        "ko"
    } else if has(0x4E00, 0x9FFF) || has(0x3400, 0x4DBF) {
        "zh"
    } else if has(0x0400, 0x04FF) {
        "ru"
    } else {
        "en"
    }
}

/// Distinct lowercase tokens of at least five chars, first five in input order.
pub fn key_phrases(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in tokenize(text) {
        if t.char_len < 5 {
            continue;
        }
        let w = t.text.to_lowercase();
        if !out.contains(&w) {
            out.push(w);
            if out.len() == 5 {
                break;
            }
        }
    }
    out
}

/// Maximal runs of capitalized tokens separated only by whitespace.
pub fn entities(text: &str) -> Vec<Json> {
    let tokens = tokenize(text);
    let capitalized = |t: &Token| t.text.chars().next().is_some_and(char::is_uppercase);
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if !capitalized(&tokens[i]) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < tokens.len()
            && capitalized(&tokens[j + 1])
            && text[tokens[j].byte_end..tokens[j + 1].byte_start].chars().all(char::is_whitespace)
        {
            j += 1;
        }
        let (first, last) = (&tokens[i], &tokens[j]);
        out.push(json!({
            "text": &text[first.byte_start..last.byte_end],
            "category": "Person",
            "offset": first.char_offset,
            "length": last.char_offset + last.char_len - first.char_offset,
        }));
        i = j + 1;
    }
    out
}

/// FNV-1a (64-bit) of the image bytes picks three distinct tags.
pub fn tags(image: &[u8]) -> Vec<Json> {
    let mut hasher = fnv::FnvHasher::default();
    hasher.write(image);
    let h = hasher.finish();
    let mut picked: Vec<usize> = Vec::with_capacity(3);
    for k in 0..16 {
        let idx = ((h >> (4 * k)) & 0xF) as usize;
        if !picked.contains(&idx) {
            picked.push(idx);
            if picked.len() == 3 {
                break;
            }
        }
    }
    let mut next = 0;
    while picked.len() < 3 {
        if !picked.contains(&next) {
            picked.push(next);
        }
        next += 1;
    }
    picked
        .iter()
        .enumerate()
        .map(|(rank, &i)| json!({"name": TAG_WORDS[i], "confidence": 1.0 - 0.1 * rank as f64}))
        .collect()
}

/// Relative slack so that a z-score of exactly 3 counts despite rounding.
pub const Z_TIE_TOLERANCE: f64 = 1e-9;

/// Points at least three population standard deviations from the mean.
pub fn anomalies(values: &[f64]) -> (Vec<bool>, f64) {
    if values.is_empty() {
        return (vec![], 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let flags = values
        .iter()
        .map(|v| sd > 0.0 && (v - mean).abs() >= 3.0 * sd * (1.0 - Z_TIE_TOLERANCE))
        .collect();
    (flags, mean)
}

/// A rejected request: status and message.
pub type Reject = (u16, String);

fn bad_request(msg: impl Into<String>) -> Reject {
    (400, msg.into())
}

fn decode_image(body: &Json) -> Result<Vec<u8>, Reject> {
    let b64 = body
        .get("image")
        .and_then(Json::as_str)
        .ok_or_else(|| bad_request("missing image"))?;
    base64::engine::general_purpose::STANDARD
        .decode(b64)
        .map_err(|e| bad_request(format!("invalid base64: {e}")))
}

fn text_documents(kind: ServiceKind, body: &Json) -> Result<Json, Reject> {
    let docs = body
        .get("documents")
        .and_then(Json::as_array)
        .ok_or_else(|| bad_request("missing documents"))?;
    if docs.len() > TEXT_MAX_BATCH {
        return Err((413, format!("batch of {} exceeds {TEXT_MAX_BATCH}", docs.len())));
    }
    let mut results = Vec::new();
    let mut errors = Vec::new();
    for doc in docs {
        let id = doc
            .get("id")
            .and_then(Json::as_str)
            .ok_or_else(|| bad_request("document without id"))?;
        let text = doc
            .get("text")
            .and_then(Json::as_str)
            .ok_or_else(|| bad_request("document without text"))?;
        if text.trim().is_empty() {
            errors.push(json!({"id": id, "error": "EmptyDocument"}));
            continue;
        }
        results.push(match kind {
            ServiceKind::Sentiment => sentiment_doc(id, text),
            ServiceKind::LanguageDetect => json!({
                "id": id,
                "detectedLanguage": {"iso6391Name": detect_language(text), "confidenceScore": 1.0}
            }),
            ServiceKind::KeyPhrase => json!({"id": id, "keyPhrases": key_phrases(text)}),
            ServiceKind::NamedEntity => json!({"id": id, "entities": entities(text)}),
            _ => unreachable!(),
        });
    }
    Ok(json!({"documents": results, "errors": errors}))
}

/// Computes the response body of a service route.
pub fn handle_service(kind: ServiceKind, body: &[u8]) -> Result<Json, Reject> {
    let body: Json = serde_json::from_slice(body).map_err(|e| bad_request(format!("malformed body: {e}")))?;
    match kind {
        k if k.is_text() => text_documents(k, &body),
        ServiceKind::Ocr => {
            let image = decode_image(&body)?;
            let embedded: Json =
                serde_json::from_slice(&image).map_err(|_| bad_request("image carries no readable text"))?;
            let text = embedded
                .get("text")
                .and_then(Json::as_str)
                .ok_or_else(|| bad_request("image carries no readable text"))?;
            Ok(json!({ "text": text }))
        }
        ServiceKind::TagImage => Ok(json!({ "tags": tags(&decode_image(&body)?) })),
        ServiceKind::AnomalyDetect => {
            let series = body
                .get("series")
                .and_then(Json::as_array)
                .ok_or_else(|| bad_request("missing series"))?;
            let values = series
                .iter()
                .map(|p| p.get("value").and_then(Json::as_f64))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| bad_request("series points need numeric values"))?;
            let (flags, mean) = anomalies(&values);
            Ok(json!({"isAnomaly": flags, "expectedValues": vec![mean; values.len()]}))
        }
        _ => unreachable!(),
    }
}
