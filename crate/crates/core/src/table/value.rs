use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Maximum nesting depth accepted for a [`Value`].
pub const MAX_DEPTH: usize = 32;

/// A single cell value.
///
/// Maps are keyed by text and kept sorted, so key uniqueness holds by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
    Bytes(Vec<u8>),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
}

/// The declared kind of a column. Mirrors the tags of [`Value`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Null,
    Bool,
    Int,
    Float,
    Text,
    Bytes,
    List,
    Map,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Kind::Null => "null",
            Kind::Bool => "bool",
            Kind::Int => "int",
            Kind::Float => "float",
            Kind::Text => "text",
            Kind::Bytes => "bytes",
            Kind::List => "list",
            Kind::Map => "map",
        };
        f.write_str(s)
    }
}

impl Value {
    pub fn kind(&self) -> Kind {
        match self {
            Value::Null => Kind::Null,
            Value::Bool(_) => Kind::Bool,
            Value::Int(_) => Kind::Int,
            Value::Float(_) => Kind::Float,
            Value::Text(_) => Kind::Text,
            Value::Bytes(_) => Kind::Bytes,
            Value::List(_) => Kind::List,
            Value::Map(_) => Kind::Map,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    /// Numeric view; integers widen to `f64`.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, Value>> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    /// Looks up `key` when this value is a map.
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.as_map().and_then(|m| m.get(key))
    }

    /// Nesting depth: scalars are 1, containers add one level.
    pub fn depth(&self) -> usize {
        match self {
            Value::List(items) => 1 + items.iter().map(Value::depth).max().unwrap_or(0),
            Value::Map(m) => 1 + m.values().map(Value::depth).max().unwrap_or(0),
            _ => 1,
        }
    }

    /// Builds a map value from key/value pairs. Later keys overwrite earlier ones.
    pub fn map<K, I>(entries: I) -> Value
    where
        K: Into<String>,
        I: IntoIterator<Item = (K, Value)>,
    {
        Value::Map(entries.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    /// Converts to JSON. Bytes become an array of integers; non-finite
    /// floats become `null`.
    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::Value as J;
        match self {
            Value::Null => J::Null,
            Value::Bool(b) => J::Bool(*b),
            Value::Int(i) => J::from(*i),
            Value::Float(f) => serde_json::Number::from_f64(*f).map_or(J::Null, J::Number),
            Value::Text(s) => J::String(s.clone()),
            Value::Bytes(b) => J::Array(b.iter().map(|x| J::from(*x)).collect()),
            Value::List(items) => J::Array(items.iter().map(Value::to_json).collect()),
            Value::Map(m) => J::Object(m.iter().map(|(k, v)| (k.clone(), v.to_json())).collect()),
        }
    }

    /// Converts from JSON, failing when nesting exceeds [`MAX_DEPTH`].
    ///
    /// Numbers that fit in an `i64` stay integers; everything else is a float.
    pub fn from_json(json: &serde_json::Value) -> Result<Value, DepthExceeded> {
        fn go(json: &serde_json::Value, level: usize) -> Result<Value, DepthExceeded> {
            use serde_json::Value as J;
            if level > MAX_DEPTH {
                return Err(DepthExceeded);
            }
            Ok(match json {
                J::Null => Value::Null,
                J::Bool(b) => Value::Bool(*b),
                J::Number(n) => match n.as_i64() {
                    Some(i) => Value::Int(i),
                    None => Value::Float(n.as_f64().unwrap_or(f64::NAN)),
                },
                J::String(s) => Value::Text(s.clone()),
                J::Array(items) => Value::List(
                    items
                        .iter()
                        .map(|v| go(v, level + 1))
                        .collect::<Result<_, _>>()?,
                ),
                J::Object(m) => Value::Map(
                    m.iter()
                        .map(|(k, v)| Ok((k.clone(), go(v, level + 1)?)))
                        .collect::<Result<_, _>>()?,
                ),
            })
        }
        go(json, 1)
    }
}

/// Nesting deeper than [`MAX_DEPTH`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("value nesting exceeds {MAX_DEPTH} levels")]
pub struct DepthExceeded;

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_owned())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<f64> for Value {
    fn from(f: f64) -> Self {
        Value::Float(f)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<Vec<u8>> for Value {
    fn from(b: Vec<u8>) -> Self {
        Value::Bytes(b)
    }
}

impl From<Vec<Value>> for Value {
    fn from(items: Vec<Value>) -> Self {
        Value::List(items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_numbers_keep_integers() {
        let j: serde_json::Value = serde_json::from_str("[1, 2.5, -7, 1e3]").unwrap();
        let v = Value::from_json(&j).unwrap();
        assert_eq!(
            v,
            Value::List(vec![
                Value::Int(1),
                Value::Float(2.5),
                Value::Int(-7),
                Value::Float(1000.0)
            ])
        );
    }

    #[test]
    fn depth_limit() {
        let ok = "[".repeat(32) + &"]".repeat(32);
        let deep = "[".repeat(33) + &"]".repeat(33);
        let ok: serde_json::Value = serde_json::from_str(&ok).unwrap();
        let deep: serde_json::Value = serde_json::from_str(&deep).unwrap();
        assert_eq!(Value::from_json(&ok).unwrap().depth(), 32);
        assert_eq!(Value::from_json(&deep), Err(DepthExceeded));
    }

    #[test]
    fn map_keys_are_unique() {
        let v = Value::map([("a", Value::Int(1)), ("a", Value::Int(2))]);
        assert_eq!(v.as_map().unwrap().len(), 1);
        assert_eq!(v.get("a"), Some(&Value::Int(2)));
    }
}
