use std::io::BufRead;

use base64::Engine as _;

use super::{DataTable, Kind, Row, Schema, TableError, Value};

#[derive(Debug, thiserror::Error)]
pub enum JsonLinesError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: expected a JSON object")]
    NotAnObject { line: usize },
    #[error("line {line}: {reason}")]
    Value { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Table(#[from] TableError),
}

/// Reads one JSON object per line into a table.
///
/// Keys are matched to columns by name; missing keys become `Null` and
/// unknown keys are ignored. Blank lines are skipped. Integers are widened
/// in float columns and base64 strings are accepted in bytes columns.
pub fn from_json_lines<R: BufRead>(
    reader: R,
    schema: Schema,
    num_partitions: usize,
) -> Result<DataTable, JsonLinesError> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let json: serde_json::Value =
            serde_json::from_str(&line).map_err(|source| JsonLinesError::Json { line: line_no, source })?;
        let obj = json
            .as_object()
            .ok_or(JsonLinesError::NotAnObject { line: line_no })?;
        let mut values = Vec::with_capacity(schema.len());
        for field in schema.fields() {
            let value = match obj.get(&field.name) {
                None => Value::Null,
                Some(j) => coerce(j, field.kind).map_err(|reason| JsonLinesError::Value {
                    line: line_no,
                    reason: format!("column `{}`: {reason}", field.name),
                })?,
            };
            values.push(value);
        }
        rows.push(Row::new(values));
    }
    Ok(DataTable::from_rows(rows, schema, num_partitions)?)
}

fn coerce(json: &serde_json::Value, kind: Kind) -> Result<Value, String> {
    let value = Value::from_json(json).map_err(|e| e.to_string())?;
    Ok(match (kind, value) {
        (Kind::Float, Value::Int(i)) => Value::Float(i as f64),
        (Kind::Bytes, Value::Text(s)) => Value::Bytes(
            base64::engine::general_purpose::STANDARD
                .decode(s)
                .map_err(|e| format!("invalid base64: {e}"))?,
        ),
        (Kind::Bytes, Value::List(items)) => Value::Bytes(
            items
                .iter()
                .map(|v| v.as_i64().and_then(|b| u8::try_from(b).ok()))
                .collect::<Option<_>>()
                .ok_or("byte arrays must hold integers in 0..=255")?,
        ),
        (_, v) => v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_and_fills_missing_with_null() {
        let src = "{\"text\":\"hi\",\"score\":1}\n\n{\"score\":2.5,\"extra\":true}\n";
        let schema = Schema::new([("text", Kind::Text), ("score", Kind::Float)]).unwrap();
        let t = from_json_lines(src.as_bytes(), schema, 2).unwrap();
        let rows = t.repartition(1).unwrap().collect();
        assert_eq!(rows[0].values(), &[Value::Text("hi".into()), Value::Float(1.0)]);
        assert_eq!(rows[1].values(), &[Value::Null, Value::Float(2.5)]);
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let schema = Schema::new([("n", Kind::Int)]).unwrap();
        let err = from_json_lines("{\"n\":\"x\"}".as_bytes(), schema, 1).unwrap_err();
        assert!(matches!(err, JsonLinesError::Table(TableError::SchemaMismatch { .. })));
    }

    #[test]
    fn rejects_non_objects() {
        let schema = Schema::new([("n", Kind::Int)]).unwrap();
        let err = from_json_lines("[1]".as_bytes(), schema, 1).unwrap_err();
        assert!(matches!(err, JsonLinesError::NotAnObject { line: 1 }));
    }

    #[test]
    fn bytes_from_base64() {
        let schema = Schema::new([("img", Kind::Bytes)]).unwrap();
        let t = from_json_lines("{\"img\":\"aGk=\"}".as_bytes(), schema, 1).unwrap();
        assert_eq!(t.collect()[0].values()[0], Value::Bytes(b"hi".to_vec()));
    }
}
