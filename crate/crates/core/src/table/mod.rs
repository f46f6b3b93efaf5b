//! An immutable, partitioned, row-oriented table.
//!
//! [`DataTable`] is the carrier every enrichment step reads from and writes
//! to. Partitions are the unit of coarse parallelism: the engine hands each
//! partition to exactly one worker. Tables never change after construction;
//! every transform returns a new table.

mod jsonl;
mod value;

use std::collections::HashSet;
use std::sync::Arc;

pub use jsonl::{from_json_lines, JsonLinesError};
pub use value::{DepthExceeded, Kind, Value, MAX_DEPTH};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TableError {
    #[error("row {row}: {reason}")]
    SchemaMismatch { row: usize, reason: String },
    #[error("partition count must be at least 1")]
    InvalidPartitionCount,
    #[error("column `{0}` already exists")]
    DuplicateColumn(String),
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
}

/// A column declaration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub kind: Kind,
}

/// Ordered column declarations with unique, non-empty names.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Schema {
    fields: Vec<Field>,
}

impl Schema {
    pub fn new<S: Into<String>>(fields: impl IntoIterator<Item = (S, Kind)>) -> Result<Self, TableError> {
        let mut schema = Schema::default();
        for (name, kind) in fields {
            schema = schema.with_field(name.into(), kind)?;
        }
        Ok(schema)
    }

    fn with_field(mut self, name: String, kind: Kind) -> Result<Self, TableError> {
        if name.is_empty() {
            return Err(TableError::InvalidSchema("empty column name".into()));
        }
        if self.index_of(&name).is_some() {
            return Err(TableError::DuplicateColumn(name));
        }
        self.fields.push(Field { name, kind });
        Ok(self)
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    /// Checks arity and kinds. `Null` is accepted in every column.
    pub fn validate(&self, row: &Row) -> Result<(), String> {
        if row.len() != self.len() {
            return Err(format!("expected {} values, got {}", self.len(), row.len()));
        }
        for (field, value) in self.fields.iter().zip(row.values()) {
            if !value.is_null() && value.kind() != field.kind {
                return Err(format!(
                    "column `{}` declared {}, got {}",
                    field.name,
                    field.kind,
                    value.kind()
                ));
            }
            if value.depth() > MAX_DEPTH {
                return Err(format!("column `{}`: {}", field.name, DepthExceeded));
            }
        }
        Ok(())
    }
}

/// Positional values aligned to a [`Schema`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Row(Vec<Value>);

impl Row {
    pub fn new(values: Vec<Value>) -> Self {
        Row(values)
    }

    pub fn values(&self) -> &[Value] {
        &self.0
    }

    pub fn get(&self, index: usize) -> Option<&Value> {
        self.0.get(index)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_values(self) -> Vec<Value> {
        self.0
    }

    fn push(&mut self, value: Value) {
        self.0.push(value);
    }
}

impl From<Vec<Value>> for Row {
    fn from(values: Vec<Value>) -> Self {
        Row(values)
    }
}

pub type Partition = Vec<Row>;

/// An immutable table split into one or more partitions.
///
/// Cloning is cheap; partitions are shared behind an `Arc`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    schema: Schema,
    partitions: Arc<Vec<Partition>>,
}

impl DataTable {
    /// Validates `rows` and deals them round-robin into `num_partitions`
    /// partitions.
    pub fn from_rows(rows: Vec<Row>, schema: Schema, num_partitions: usize) -> Result<Self, TableError> {
        if num_partitions == 0 {
            return Err(TableError::InvalidPartitionCount);
        }
        for (i, row) in rows.iter().enumerate() {
            schema
                .validate(row)
                .map_err(|reason| TableError::SchemaMismatch { row: i, reason })?;
        }
        Ok(DataTable {
            schema,
            partitions: Arc::new(round_robin(rows, num_partitions)),
        })
    }

    /// Builds a table from pre-formed partitions, validating every row.
    pub fn from_partitions(partitions: Vec<Partition>, schema: Schema) -> Result<Self, TableError> {
        if partitions.is_empty() {
            return Err(TableError::InvalidPartitionCount);
        }
        for (i, row) in partitions.iter().flatten().enumerate() {
            schema
                .validate(row)
                .map_err(|reason| TableError::SchemaMismatch { row: i, reason })?;
        }
        Ok(DataTable {
            schema,
            partitions: Arc::new(partitions),
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    pub fn partition_sizes(&self) -> Vec<usize> {
        self.partitions.iter().map(Vec::len).collect()
    }

    pub fn num_rows(&self) -> usize {
        self.partitions.iter().map(Vec::len).sum()
    }

    /// Concatenates partitions in order and redistributes round-robin.
    pub fn repartition(&self, n: usize) -> Result<Self, TableError> {
        if n == 0 {
            return Err(TableError::InvalidPartitionCount);
        }
        Ok(DataTable {
            schema: self.schema.clone(),
            partitions: Arc::new(round_robin(self.collect(), n)),
        })
    }

    /// Appends a column. `values` are aligned with [`DataTable::collect`] order.
    pub fn with_column(&self, name: &str, kind: Kind, values: Vec<Value>) -> Result<Self, TableError> {
        let expected = self.num_rows();
        if values.len() != expected {
            return Err(TableError::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        let schema = self.schema.clone().with_field(name.to_owned(), kind)?;
        let mut values = values.into_iter();
        let partitions = self
            .partitions
            .iter()
            .map(|part| {
                part.iter()
                    .map(|row| {
                        let mut row = row.clone();
                        row.push(values.next().expect("length checked"));
                        row
                    })
                    .collect()
            })
            .collect();
        DataTable::from_partitions(partitions, schema)
    }

    /// Appends a column given per-partition values.
    pub fn with_partitioned_column(
        &self,
        name: &str,
        kind: Kind,
        values: Vec<Vec<Value>>,
    ) -> Result<Self, TableError> {
        let flat_len: usize = values.iter().map(Vec::len).sum();
        let shape_ok = values.len() == self.num_partitions()
            && values.iter().zip(self.partitions.iter()).all(|(v, p)| v.len() == p.len());
        if !shape_ok {
            return Err(TableError::LengthMismatch {
                expected: self.num_rows(),
                actual: flat_len,
            });
        }
        self.with_column(name, kind, values.into_iter().flatten().collect())
    }

    /// All rows: partition order, then within-partition order.
    pub fn collect(&self) -> Vec<Row> {
        self.partitions.iter().flatten().cloned().collect()
    }

    /// Values of one column in collect order.
    pub fn column(&self, name: &str) -> Option<Vec<Value>> {
        let idx = self.schema.index_of(name)?;
        Some(
            self.partitions
                .iter()
                .flatten()
                .map(|r| r.values()[idx].clone())
                .collect(),
        )
    }

    /// Column names, in order.
    pub fn column_names(&self) -> Vec<&str> {
        self.schema.fields().iter().map(|f| f.name.as_str()).collect()
    }

    /// Set of column names; convenient for binding validation.
    pub fn column_set(&self) -> HashSet<&str> {
        self.column_names().into_iter().collect()
    }
}

fn round_robin(rows: Vec<Row>, n: usize) -> Vec<Partition> {
    let mut parts: Vec<Partition> = (0..n).map(|_| Vec::with_capacity(rows.len() / n + 1)).collect();
    for (i, row) in rows.into_iter().enumerate() {
        parts[i % n].push(row);
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema() -> Schema {
        Schema::new([("id", Kind::Int), ("text", Kind::Text)]).unwrap()
    }

    fn rows(n: usize) -> Vec<Row> {
        (0..n)
            .map(|i| Row::new(vec![Value::Int(i as i64), Value::Text(format!("r{i}"))]))
            .collect()
    }

    #[test]
    fn single_partition_keeps_order() {
        let t = DataTable::from_rows(rows(10), schema(), 1).unwrap();
        assert_eq!(t.partition_sizes(), vec![10]);
        assert_eq!(t.collect(), rows(10));
    }

    #[test]
    fn round_robin_sizes() {
        let t = DataTable::from_rows(rows(10), schema(), 3).unwrap();
        assert_eq!(t.partition_sizes(), vec![4, 3, 3]);
        // within-partition order follows input order
        let p0: Vec<_> = t.partitions()[0].iter().map(|r| r.values()[0].clone()).collect();
        assert_eq!(p0, vec![Value::Int(0), Value::Int(3), Value::Int(6), Value::Int(9)]);
    }

    #[test]
    fn empty_rows() {
        let t = DataTable::from_rows(vec![], schema(), 4).unwrap();
        assert_eq!(t.partition_sizes(), vec![0, 0, 0, 0]);
        assert!(t.collect().is_empty());
    }

    #[test]
    fn zero_partitions_rejected() {
        assert_eq!(
            DataTable::from_rows(rows(3), schema(), 0),
            Err(TableError::InvalidPartitionCount)
        );
        let t = DataTable::from_rows(rows(3), schema(), 1).unwrap();
        assert_eq!(t.repartition(0), Err(TableError::InvalidPartitionCount));
    }

    #[test]
    fn schema_mismatch() {
        let bad = vec![Row::new(vec![Value::Text("x".into()), Value::Null])];
        assert!(matches!(
            DataTable::from_rows(bad, schema(), 1),
            Err(TableError::SchemaMismatch { row: 0, .. })
        ));
        let short = vec![Row::new(vec![Value::Int(1)])];
        assert!(matches!(
            DataTable::from_rows(short, schema(), 1),
            Err(TableError::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn null_allowed_everywhere() {
        let r = vec![Row::new(vec![Value::Null, Value::Null])];
        assert!(DataTable::from_rows(r, schema(), 1).is_ok());
    }

    #[test]
    fn schema_rejects_duplicates_and_empty_names() {
        assert!(matches!(
            Schema::new([("a", Kind::Int), ("a", Kind::Text)]),
            Err(TableError::DuplicateColumn(_))
        ));
        assert!(matches!(
            Schema::new([("", Kind::Int)]),
            Err(TableError::InvalidSchema(_))
        ));
    }

    #[test]
    fn repartition_examples() {
        let t = DataTable::from_rows(rows(10), schema(), 3).unwrap();
        assert_eq!(t.repartition(1).unwrap().partition_sizes(), vec![10]);
        let one = DataTable::from_rows(rows(10), schema(), 1).unwrap();
        let four = one.repartition(4).unwrap();
        assert_eq!(four.partition_sizes(), vec![3, 3, 2, 2]);
        assert_eq!(four.repartition(4).unwrap().partition_sizes(), vec![3, 3, 2, 2]);
    }

    #[test]
    fn with_column_examples() {
        let t = DataTable::from_rows(rows(3), schema(), 2).unwrap();
        let t2 = t.with_column("c", Kind::Int, vec![Value::Int(7); 3]).unwrap();
        assert_eq!(t2.schema().len(), 3);
        assert!(t2.collect().iter().all(|r| r.values()[2] == Value::Int(7)));
        assert_eq!(t2.column("text"), t.column("text"));

        let empty = DataTable::from_rows(vec![], schema(), 2).unwrap();
        let e2 = empty.with_column("c", Kind::Int, vec![]).unwrap();
        assert_eq!(e2.schema().len(), 3);
        assert_eq!(e2.num_rows(), 0);

        assert_eq!(
            t.with_column("id", Kind::Int, vec![Value::Null; 3]),
            Err(TableError::DuplicateColumn("id".into()))
        );
        assert!(matches!(
            t.with_column("c", Kind::Int, vec![Value::Null; 2]),
            Err(TableError::LengthMismatch { expected: 3, actual: 2 })
        ));
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        prop_oneof![
            Just(Value::Null),
            any::<i64>().prop_map(Value::Int),
            "[a-z]{0,8}".prop_map(Value::Text),
        ]
    }

    fn sorted(mut v: Vec<Row>) -> Vec<String> {
        let mut keys: Vec<String> = v.drain(..).map(|r| format!("{:?}", r)).collect();
        keys.sort();
        keys
    }

    proptest! {
        #[test]
        fn round_trip_single_partition(vals in proptest::collection::vec((arb_value(), arb_value()), 0..50)) {
            let s = Schema::new([("a", Kind::Int), ("b", Kind::Text)]).unwrap();
            let rows: Vec<Row> = vals
                .into_iter()
                .map(|(a, b)| {
                    let a = if matches!(a, Value::Text(_)) { Value::Null } else { a };
                    let b = if matches!(b, Value::Int(_)) { Value::Null } else { b };
                    Row::new(vec![a, b])
                })
                .collect();
            let t = DataTable::from_rows(rows.clone(), s, 1).unwrap();
            prop_assert_eq!(t.collect(), rows);
        }

        #[test]
        fn repartition_preserves_multiset_and_balance(n_rows in 0usize..200, k in 1usize..9, n in 1usize..17) {
            let t = DataTable::from_rows(rows(n_rows), schema(), k).unwrap();
            let r = t.repartition(n).unwrap();
            prop_assert_eq!(r.num_partitions(), n);
            prop_assert_eq!(sorted(r.collect()), sorted(t.collect()));
            let sizes = r.partition_sizes();
            let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
            prop_assert!(spread <= 1);
        }
    }
}
