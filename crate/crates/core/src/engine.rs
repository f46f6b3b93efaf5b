//! Partition-parallel execution with a bounded, order-preserving window of
//! pending operations per worker.
//!
//! Two levels of parallelism combine here. A pool of `worker_threads`
//! workers each own one partition at a time. Inside a partition, a worker
//! keeps up to `async_factor` operations pending and yields their results in
//! input order, like an ordinary iterator whose items happen to be futures.
//! The total number of pending operations is therefore bounded by
//! `worker_threads * async_factor`.

use std::collections::VecDeque;
use std::future::Future;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::future::BoxFuture;
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use tokio::task::JoinSet;

use crate::metrics::Metrics;
use crate::table::{DataTable, Kind, Row, TableError, Value};

pub const MAX_ASYNC_FACTOR: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsyncConfig {
    /// Maximum pending operations per worker.
    pub async_factor: usize,
    /// Deadline for a single request attempt, in milliseconds.
    pub request_timeout_ms: u64,
    /// Partitions processed concurrently.
    pub worker_threads: usize,
}

impl Default for AsyncConfig {
    fn default() -> Self {
        AsyncConfig {
            async_factor: 1,
            request_timeout_ms: 30_000,
            worker_threads: 1,
        }
    }
}

impl AsyncConfig {
    pub fn new(async_factor: usize, worker_threads: usize) -> Self {
        AsyncConfig {
            async_factor,
            worker_threads,
            ..Self::default()
        }
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(1..=MAX_ASYNC_FACTOR).contains(&self.async_factor) {
            return Err(EngineError::InvalidConfig(format!(
                "async_factor must be in [1, {MAX_ASYNC_FACTOR}], got {}",
                self.async_factor
            )));
        }
        if self.request_timeout_ms == 0 {
            return Err(EngineError::InvalidConfig("request timeout must be positive".into()));
        }
        if self.worker_threads == 0 {
            return Err(EngineError::InvalidConfig("worker_threads must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("invalid async config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("worker panicked: {0}")]
    WorkerPanic(String),
}

/// Category of a per-row failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailureKind {
    Transport,
    Timeout,
    AttemptsExhausted,
    ClientError,
    ServerError,
    MalformedResponse,
    BatchShapeMismatch,
    MissingDocument,
    ServiceError,
    Operation,
}

impl FailureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureKind::Transport => "Transport",
            FailureKind::Timeout => "Timeout",
            FailureKind::AttemptsExhausted => "AttemptsExhausted",
            FailureKind::ClientError => "ClientError",
            FailureKind::ServerError => "ServerError",
            FailureKind::MalformedResponse => "MalformedResponse",
            FailureKind::BatchShapeMismatch => "BatchShapeMismatch",
            FailureKind::MissingDocument => "MissingDocument",
            FailureKind::ServiceError => "ServiceError",
            FailureKind::Operation => "Operation",
        }
    }
}

/// A row-level failure. Failures are data; they never abort a job.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{} after {attempts} attempt(s): {message}", kind.as_str())]
pub struct Failure {
    pub kind: FailureKind,
    pub message: String,
    pub attempts: u32,
}

impl Failure {
    pub fn new(kind: FailureKind, message: impl Into<String>, attempts: u32) -> Self {
        Failure {
            kind,
            message: message.into(),
            attempts: attempts.max(1),
        }
    }

    /// Column representation: `{"error": kind, "message": text}`.
    pub fn to_value(&self) -> Value {
        Value::map([
            ("error", Value::from(self.kind.as_str())),
            ("message", Value::from(self.message.as_str())),
        ])
    }

    /// Recognises a value produced by [`Failure::to_value`].
    pub fn is_failure_value(value: &Value) -> bool {
        value
            .as_map()
            .is_some_and(|m| m.len() == 2 && m.get("error").is_some_and(|e| e.as_str().is_some()) && m.contains_key("message"))
    }
}

/// Result of one item, tagged with its position in the partition.
#[derive(Debug, Clone, PartialEq)]
pub struct RowOutcome<T = Value> {
    pub index: usize,
    pub result: Result<T, Failure>,
}

impl RowOutcome<Value> {
    /// The value stored in an outcome column.
    pub fn into_value(self) -> Value {
        match self.result {
            Ok(v) => v,
            Err(f) => f.to_value(),
        }
    }
}

/// Runs `op` over `items` with at most `async_factor` invocations pending,
/// yielding outcomes in input order.
///
/// With `async_factor == 1` this is a sequential fold. Each pending
/// invocation is counted in `metrics` when provided.
pub async fn map_partition_buffered<I, T, F, Fut>(
    items: I,
    async_factor: usize,
    metrics: Option<&Metrics>,
    mut op: F,
) -> Vec<RowOutcome<T>>
where
    I: IntoIterator,
    F: FnMut(usize, I::Item) -> Fut,
    Fut: Future<Output = Result<T, Failure>>,
{
    let window = async_factor.max(1);
    futures::stream::iter(items.into_iter().enumerate())
        .map(|(index, item)| {
            let fut = op(index, item);
            async move {
                let _guard = metrics.map(Metrics::enter);
                RowOutcome {
                    index,
                    result: fut.await,
                }
            }
        })
        .buffered(window)
        .collect()
        .await
}

/// Runs `op` over every item of every partition.
///
/// `min(worker_threads, partitions)` workers pull whole partitions from a
/// shared queue; each partition is driven by [`map_partition_buffered`].
/// `op` receives `(partition, index, item)`. Output keeps partition order.
pub async fn run_partitions<T, O, F, Fut>(
    partitions: Vec<Vec<T>>,
    cfg: &AsyncConfig,
    metrics: Arc<Metrics>,
    op: F,
) -> Result<Vec<Vec<RowOutcome<O>>>, EngineError>
where
    T: Send + 'static,
    O: Send + 'static,
    F: Fn(usize, usize, T) -> Fut + Send + Sync + 'static,
    Fut: Future<Output = Result<O, Failure>> + Send + 'static,
{
    cfg.validate()?;
    let n = partitions.len();
    let queue: Arc<Mutex<VecDeque<(usize, Vec<T>)>>> =
        Arc::new(Mutex::new(partitions.into_iter().enumerate().collect()));
    let op = Arc::new(op);
    let async_factor = cfg.async_factor;

    let mut workers = JoinSet::new();
    for _ in 0..cfg.worker_threads.min(n) {
        let queue = queue.clone();
        let op = op.clone();
        let metrics = metrics.clone();
        workers.spawn(async move {
            let mut done = Vec::new();
            loop {
                let next = queue.lock().unwrap().pop_front();
                let Some((pidx, items)) = next else { break };
                let outcomes = map_partition_buffered(items, async_factor, Some(&metrics), |i, item| {
                    op(pidx, i, item)
                })
                .await;
                done.push((pidx, outcomes));
            }
            done
        });
    }

    let mut results: Vec<Option<Vec<RowOutcome<O>>>> = (0..n).map(|_| None).collect();
    while let Some(joined) = workers.join_next().await {
        let done = joined.map_err(|e| EngineError::WorkerPanic(e.to_string()))?;
        for (pidx, outcomes) in done {
            results[pidx] = Some(outcomes);
        }
    }
    Ok(results
        .into_iter()
        .map(|r| r.expect("every partition is processed"))
        .collect())
}

/// A per-row operation for [`run_table_job`].
pub type RowOp = Arc<dyn Fn(Row) -> BoxFuture<'static, Result<Value, Failure>> + Send + Sync>;

/// Applies `op` to every row and appends the outcomes as `output_column`.
///
/// The outcome column is map-kinded. Failures are stored as
/// `{"error", "message"}` maps; successful non-map values other than `Null`
/// are wrapped as `{"value": v}`.
pub async fn run_table_job(
    table: &DataTable,
    output_column: &str,
    op: RowOp,
    cfg: &AsyncConfig,
    metrics: Arc<Metrics>,
) -> Result<DataTable, EngineError> {
    cfg.validate()?;
    if table.schema().contains(output_column) {
        return Err(TableError::DuplicateColumn(output_column.to_owned()).into());
    }
    let partitions: Vec<Vec<Row>> = table.partitions().to_vec();
    metrics.add_rows(table.num_rows() as u64);
    let outcomes = run_partitions(partitions, cfg, metrics.clone(), move |_, _, row| op(row)).await?;
    let values: Vec<Vec<Value>> = outcomes
        .into_iter()
        .map(|part| {
            part.into_iter()
                .map(|o| match o.result {
                    Ok(v @ (Value::Map(_) | Value::Null)) => v,
                    Ok(v) => Value::map([("value", v)]),
                    Err(f) => {
                        metrics.add_failures(1);
                        f.to_value()
                    }
                })
                .collect()
        })
        .collect();
    Ok(table.with_partitioned_column(output_column, Kind::Map, values)?)
}
