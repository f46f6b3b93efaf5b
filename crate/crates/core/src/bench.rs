//! Throughput and latency experiments against a service endpoint.
//!
//! Every measurement runs one warm-up pass over a small slice of the input,
//! then `reps` timed passes over the full input, and reports the median wall
//! time. Ratios are always computed from those medians.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use tokio::time::Instant;

use crate::engine::AsyncConfig;
use crate::metrics::{median, percentile};
use crate::reliability::RetryPolicy;
use crate::services::ServiceKind;
use crate::table::{DataTable, Kind, Row, Schema, TableError, Value};
use crate::transformer::{ExecContext, ParamBinding, Pipeline, ServiceTransformer, TransformError};
use crate::transport::{DelayedTransport, HttpTransport, Transport};

pub const CSV_HEADER: [&str; 8] = [
    "experiment",
    "partitions",
    "async_factor",
    "rows",
    "wall_ms",
    "rows_per_sec",
    "retries",
    "failures",
];

pub const LATENCY_CSV_HEADER: [&str; 6] = [
    "experiment",
    "service",
    "inject_delay_ms",
    "requests",
    "median_latency_ms",
    "p95_latency_ms",
];

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error("server unreachable at {url}: {reason}")]
    Unreachable { url: String, reason: String },
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    PartitionSweep,
    AsyncSweep,
    Latency,
    /// Same job at `A = 1` and `A = 8`.
    Throughput,
}

impl ExperimentKind {
    pub fn id(self) -> &'static str {
        match self {
            ExperimentKind::PartitionSweep => "partition-sweep",
            ExperimentKind::AsyncSweep => "async-sweep",
            ExperimentKind::Latency => "latency",
            ExperimentKind::Throughput => "sync-vs-async",
        }
    }
}

/// What to run for each measurement.
#[derive(Debug, Clone)]
pub enum Job {
    Single(ServiceTransformer),
    Pipeline(Pipeline),
}

impl Job {
    fn with_async(&self, cfg: &AsyncConfig) -> Result<Job, TransformError> {
        Ok(match self {
            Job::Single(t) => Job::Single(t.with_async_config(cfg.clone())?),
            Job::Pipeline(p) => Job::Pipeline(Pipeline::new(
                p.stages()
                    .iter()
                    .map(|s| s.with_async_config(cfg.clone()))
                    .collect::<Result<_, _>>()?,
            )?),
        })
    }

    async fn run(&self, table: &DataTable, ctx: &ExecContext) -> Result<DataTable, TransformError> {
        match self {
            Job::Single(t) => t.transform(table, ctx).await,
            Job::Pipeline(p) => p.transform(table, ctx).await,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Label for the `experiment` column; defaults to the kind's id.
    pub label: Option<String>,
    pub rows: usize,
    pub service: ServiceKind,
    pub batch_size: usize,
    pub partitions: Vec<usize>,
    pub async_factors: Vec<usize>,
    /// Defaults to the largest partition count.
    pub worker_threads: Option<usize>,
    pub server_url: String,
    /// Second endpoint for the latency experiment; defaults to `server_url`.
    pub remote_url: Option<String>,
    /// Client-side delay added to every request to the remote endpoint.
    pub inject_delay: Duration,
    pub reps: usize,
    pub warmup_rows: usize,
    pub retry_policy: RetryPolicy,
    /// Rows to use instead of generated ones.
    pub input: Option<DataTable>,
    /// Replaces the default single-service job.
    pub pipeline: Option<Pipeline>,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, service: ServiceKind, server_url: impl Into<String>) -> Self {
        ExperimentSpec {
            kind,
            label: None,
            rows: 1000,
            service,
            batch_size: service.max_batch(),
            partitions: vec![1],
            async_factors: vec![1],
            worker_threads: None,
            server_url: server_url.into(),
            remote_url: None,
            inject_delay: Duration::from_millis(50),
            reps: 3,
            warmup_rows: 50,
            retry_policy: RetryPolicy::default(),
            input: None,
            pipeline: None,
            seed: 7,
        }
    }

    fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.kind.id().to_owned())
    }

    fn workers(&self) -> usize {
        self.worker_threads
            .unwrap_or_else(|| self.partitions.iter().copied().max().unwrap_or(1))
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::InvalidSpec(m));
        if self.reps < 3 {
            return bad(format!("need at least 3 repetitions, got {}", self.reps));
        }
        let throughput = self.kind != ExperimentKind::Latency;
        if throughput && self.input.is_none() && self.rows < 100 {
            return bad(format!("throughput experiments need at least 100 rows, got {}", self.rows));
        }
        if self.partitions.is_empty() || self.partitions.contains(&0) {
            return bad("partition counts must be positive".into());
        }
        if self.async_factors.is_empty() {
            return bad("no async factors".into());
        }
        for &a in &self.async_factors {
            AsyncConfig::new(a, 1)
                .validate()
                .map_err(|e| BenchError::InvalidSpec(e.to_string()))?;
        }
        if !(1..=self.service.max_batch()).contains(&self.batch_size) {
            return bad(format!(
                "batch size {} outside 1..={} for {}",
                self.batch_size,
                self.service.max_batch(),
                self.service
            ));
        }
        self.retry_policy
            .validate()
            .map_err(|e| BenchError::InvalidSpec(e.to_string()))?;
        Ok(())
    }

    fn job(&self, url: &str) -> Result<Job, TransformError> {
        if let Some(p) = &self.pipeline {
            return Ok(Job::Pipeline(p.clone()));
        }
        let input = input_column(self.service);
        Ok(Job::Single(
            ServiceTransformer::builder(self.service)
                .url(ParamBinding::scalar(url))
                .set_param(input, ParamBinding::column(input))
                .output_column("output")
                .batch_size(self.batch_size)
                .retry_policy(self.retry_policy.clone())
                .build()?,
        ))
    }

    fn table(&self) -> Result<DataTable, TableError> {
        match &self.input {
            Some(t) => Ok(t.clone()),
            None => synthetic_table(self.service, self.rows, self.seed),
        }
    }
}

/// One line of results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasurementRow {
    pub experiment: String,
    pub partitions: usize,
    pub async_factor: usize,
    pub rows: usize,
    /// Median over repetitions.
    pub wall_ms: f64,
    pub rows_per_sec: f64,
    pub retries: u64,
    pub failures: u64,
    pub worker_threads: usize,
    pub rep_wall_ms: Vec<f64>,
    pub requests: u64,
    pub max_in_flight: usize,
    pub median_latency_ms: Option<f64>,
    pub p95_latency_ms: Option<f64>,
    pub inject_delay_ms: f64,
}

/// The column a service reads in generated tables.
pub fn input_column(service: ServiceKind) -> &'static str {
    match service {
        s if s.is_text() => "text",
        ServiceKind::Ocr | ServiceKind::TagImage => "image",
        _ => "series",
    }
}

/// Schema of generated tables for `service`.
pub fn input_schema(service: ServiceKind) -> Schema {
    let kind = match input_column(service) {
        "text" => Kind::Text,
        "image" => Kind::Bytes,
        _ => Kind::List,
    };
    Schema::new([(input_column(service), kind)]).expect("single column")
}

const WORDS: [&str; 16] = [
    "good", "bad", "great", "terrible", "service", "latency", "love", "awful", "table", "partition", "Spark",
    "Azure", "request", "wonderful", "poor", "model",
];

/// Deterministic rows suited to `service`, in one partition.
pub fn synthetic_table(service: ServiceKind, rows: usize, seed: u64) -> Result<DataTable, TableError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows)
        .map(|i| {
            let v = match input_column(service) {
                "text" => {
                    let n = rng.random_range(3..9);
                    let words: Vec<&str> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
                    Value::from(words.join(" "))
                }
                "image" => Value::Bytes(
                    serde_json::to_vec(&json!({"text": format!("scanned page {i}")})).expect("json"),
                ),
                _ => Value::List((0..24).map(|_| Value::from(rng.random_range(0.0..10.0))).collect()),
            };
            Row::new(vec![v])
        })
        .collect();
    DataTable::from_rows(data, input_schema(service), 1)
}

struct RunStats {
    wall_ms: f64,
    retries: u64,
    failures: u64,
    requests: u64,
    max_in_flight: usize,
    latencies_ms: Vec<f64>,
}

async fn run_once(job: &Job, table: &DataTable, ctx: &ExecContext) -> Result<RunStats, BenchError> {
    let ctx = ctx.with_fresh_metrics();
    let start = Instant::now();
    job.run(table, &ctx).await?;
    let wall = start.elapsed();
    let snap = ctx.metrics.snapshot(wall);
    Ok(RunStats {
        wall_ms: wall.as_secs_f64() * 1000.0,
        retries: snap.retries,
        failures: snap.failures,
        requests: snap.requests,
        max_in_flight: snap.max_in_flight,
        latencies_ms: ctx.metrics.latencies().iter().map(|d| d.as_secs_f64() * 1000.0).collect(),
    })
}

/// Warm-up plus `reps` timed runs of `job` over `table` split into `p` partitions.
async fn measure(
    spec: &ExperimentSpec,
    job: &Job,
    table: &DataTable,
    ctx: &ExecContext,
    p: usize,
    cfg: &AsyncConfig,
) -> Result<MeasurementRow, BenchError> {
    let job = job.with_async(cfg)?;
    let warm: Vec<Row> = table.collect().into_iter().take(spec.warmup_rows).collect();
    if !warm.is_empty() {
        let warm = DataTable::from_rows(warm, table.schema().clone(), p)?;
        run_once(&job, &warm, ctx).await?;
    }
    let table = table.repartition(p)?;
    let mut runs = Vec::with_capacity(spec.reps);
    for _ in 0..spec.reps {
        runs.push(run_once(&job, &table, ctx).await?);
    }
    let walls: Vec<f64> = runs.iter().map(|r| r.wall_ms).collect();
    let wall_ms = median(&walls).expect("reps >= 1");
    // counters come from the run closest to the median
    let mid = runs
        .iter()
        .min_by(|a, b| (a.wall_ms - wall_ms).abs().total_cmp(&(b.wall_ms - wall_ms).abs()))
        .expect("reps >= 1");
    let latencies: Vec<f64> = runs.iter().flat_map(|r| r.latencies_ms.iter().copied()).collect();
    let rows = table.num_rows();
    Ok(MeasurementRow {
        experiment: spec.label(),
        partitions: p,
        async_factor: cfg.async_factor,
        rows,
        wall_ms,
        rows_per_sec: rows as f64 / (wall_ms / 1000.0),
        retries: mid.retries,
        failures: mid.failures,
        worker_threads: cfg.worker_threads,
        rep_wall_ms: walls,
        requests: mid.requests,
        max_in_flight: runs.iter().map(|r| r.max_in_flight).max().unwrap_or(0),
        median_latency_ms: median(&latencies),
        p95_latency_ms: percentile(&latencies, 95.0),
        inject_delay_ms: 0.0,
    })
}

/// Fails fast when nothing answers `GET /health`-style probes on the url.
async fn probe(url: &str) -> Result<(), BenchError> {
    let target = format!("{}/health", url.trim_end_matches('/'));
    let unreachable = |reason: String| BenchError::Unreachable {
        url: url.to_owned(),
        reason,
    };
    let req = crate::http::HttpRequestData::new(crate::http::Method::Get, &target, vec![], None)
        .map_err(|e| unreachable(e.to_string()))?;
    HttpTransport::new()
        .send(&req)
        .await
        .map(|_| ())
        .map_err(|e| unreachable(e.to_string()))
}

fn http_ctx() -> ExecContext {
    ExecContext::new(Arc::new(HttpTransport::new()))
}

/// One row per partition count, `A` fixed to the first async factor.
pub async fn run_partition_sweep(spec: &ExperimentSpec) -> Result<Vec<MeasurementRow>, BenchError> {
    spec.validate()?;
    probe(&spec.server_url).await?;
    let job = spec.job(&spec.server_url)?;
    let table = spec.table()?;
    let ctx = http_ctx();
    let a = spec.async_factors[0];
    let mut out = Vec::new();
    for &p in &spec.partitions {
        let cfg = AsyncConfig::new(a, spec.workers());
        out.push(measure(spec, &job, &table, &ctx, p, &cfg).await?);
    }
    Ok(out)
}

/// One row per async factor, partitions fixed to the first entry.
pub async fn run_async_sweep(spec: &ExperimentSpec) -> Result<Vec<MeasurementRow>, BenchError> {
    spec.validate()?;
    probe(&spec.server_url).await?;
    let job = spec.job(&spec.server_url)?;
    let table = spec.table()?;
    let ctx = http_ctx();
    let p = spec.partitions[0];
    let mut out = Vec::new();
    for &a in &spec.async_factors {
        let cfg = AsyncConfig::new(a, spec.workers());
        out.push(measure(spec, &job, &table, &ctx, p, &cfg).await?);
    }
    Ok(out)
}

/// `A = 1` against `A = 8`, everything else equal.
pub async fn run_sync_vs_async(spec: &ExperimentSpec) -> Result<Vec<MeasurementRow>, BenchError> {
    let spec = ExperimentSpec {
        async_factors: vec![1, 8],
        ..spec.clone()
    };
    run_async_sweep(&spec).await
}

/// Request latency against a local endpoint and a remote one that sits
/// behind an injected client-side delay. Rows are sent one request at a time.
pub async fn run_latency_experiment(spec: &ExperimentSpec) -> Result<Vec<MeasurementRow>, BenchError> {
    spec.validate()?;
    let remote_url = spec.remote_url.clone().unwrap_or_else(|| spec.server_url.clone());
    probe(&spec.server_url).await?;
    probe(&remote_url).await?;
    let table = spec.table()?;
    let cfg = AsyncConfig::new(1, 1);
    let presets: [(&str, &str, Duration); 2] = [
        ("local", &spec.server_url, Duration::ZERO),
        ("remote", &remote_url, spec.inject_delay),
    ];
    let mut out = Vec::new();
    for (name, url, delay) in presets {
        let transport: Arc<dyn Transport> = if delay.is_zero() {
            Arc::new(HttpTransport::new())
        } else {
            Arc::new(DelayedTransport::new(HttpTransport::new(), delay))
        };
        let ctx = ExecContext::new(transport);
        let job = spec.job(url)?;
        let mut row = measure(spec, &job, &table, &ctx, 1, &cfg).await?;
        row.experiment = format!("{}-{name}", spec.label());
        row.inject_delay_ms = delay.as_secs_f64() * 1000.0;
        out.push(row);
    }
    Ok(out)
}

pub async fn run(spec: &ExperimentSpec) -> Result<Vec<MeasurementRow>, BenchError> {
    match spec.kind {
        ExperimentKind::PartitionSweep => run_partition_sweep(spec).await,
        ExperimentKind::AsyncSweep => run_async_sweep(spec).await,
        ExperimentKind::Throughput => run_sync_vs_async(spec).await,
        ExperimentKind::Latency => run_latency_experiment(spec).await,
    }
}

/// Throughput of each row divided by that of the first.
pub fn ratios(rows: &[MeasurementRow]) -> Vec<f64> {
    let Some(base) = rows.first() else { return vec![] };
    rows.iter().map(|r| r.rows_per_sec / base.rows_per_sec).collect()
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.3}")
}

/// Writes the results table with the fixed header.
pub fn write_csv(rows: &[MeasurementRow], path: &Path) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.partitions.to_string(),
            r.async_factor.to_string(),
            r.rows.to_string(),
            fmt_f64(r.wall_ms),
            fmt_f64(r.rows_per_sec),
            r.retries.to_string(),
            r.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes per-preset latency percentiles next to the main results.
pub fn write_latency_csv(rows: &[MeasurementRow], service: ServiceKind, path: &Path) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LATENCY_CSV_HEADER)?;
    for r in rows {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        w.write_record([
            r.experiment.clone(),
            service.as_str().to_owned(),
            fmt_f64(r.inject_delay_ms),
            r.requests.to_string(),
            opt(r.median_latency_ms),
            opt(r.p95_latency_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Path of the latency sidecar for a results file: `results.csv` → `results.latency.csv`.
pub fn latency_sidecar_path(out: &Path) -> std::path::PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    out.with_file_name(format!("{stem}.latency.csv"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl ThresholdCheck {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        ThresholdCheck {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Floors applied by `msvc-bench --assert`.
///
/// `configured_latency_ms` enables the local-latency check when the
/// service's compute latency is known.
pub fn check_thresholds(
    spec: &ExperimentSpec,
    rows: &[MeasurementRow],
    configured_latency_ms: Option<f64>,
) -> Vec<ThresholdCheck> {
    let r = ratios(rows);
    let mut checks = Vec::new();
    match spec.kind {
        ExperimentKind::PartitionSweep => {
            let workers = spec.workers();
            for (row, ratio) in rows.iter().zip(&r) {
                if row.partitions <= workers {
                    let floor = 0.8 * row.partitions as f64 / rows[0].partitions as f64;
                    checks.push(ThresholdCheck::new(
                        format!("ratio(P={})", row.partitions),
                        *ratio >= floor,
                        format!("{ratio:.2} >= {floor:.2}"),
                    ));
                }
            }
        }
        ExperimentKind::AsyncSweep => {
            for (a, floor) in [(8, 4.0), (16, 8.0)] {
                if let Some(i) = rows.iter().position(|row| row.async_factor == a) {
                    checks.push(ThresholdCheck::new(
                        format!("ratio(A={a})"),
                        r[i] >= floor,
                        format!("{:.2} >= {floor}", r[i]),
                    ));
                }
            }
            let monotone = r.windows(2).all(|w| w[1] >= 0.9 * w[0]);
            checks.push(ThresholdCheck::new(
                "ratio non-decreasing in A (10% noise)",
                monotone,
                format!("{:?}", r.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>()),
            ));
        }
        ExperimentKind::Throughput => {
            let floor = if spec.service.is_text() { 1.3 } else { 2.0 };
            let ratio = r.get(1).copied().unwrap_or(0.0);
            checks.push(ThresholdCheck::new(
                "ratio(A=8 vs A=1)",
                ratio >= floor,
                format!("{ratio:.2} >= {floor}"),
            ));
        }
        ExperimentKind::Latency => {
            if let [local, remote] = rows {
                let (l, rm) = (local.median_latency_ms.unwrap_or(f64::NAN), remote.median_latency_ms.unwrap_or(f64::NAN));
                let target = spec.inject_delay.as_secs_f64() * 1000.0;
                let gap = rm - l;
                checks.push(ThresholdCheck::new(
                    "remote - local median",
                    (gap - target).abs() <= 10.0,
                    format!("{gap:.2} ms within {target} ± 10 ms"),
                ));
                if let Some(cfg) = configured_latency_ms {
                    checks.push(ThresholdCheck::new(
                        "local median vs compute latency",
                        (l - cfg).abs() <= 5.0,
                        format!("{l:.2} ms within {cfg} ± 5 ms"),
                    ));
                }
            }
        }
    }
    let accounted = rows.iter().all(|row| row.failures as usize <= row.rows);
    checks.push(ThresholdCheck::new("failures within row count", accounted, ""));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(experiment: &str, rows_per_sec: f64) -> MeasurementRow {
        MeasurementRow {
            experiment: experiment.into(),
            partitions: 2,
            async_factor: 4,
            rows: 100,
            wall_ms: 100_000.0 / rows_per_sec,
            rows_per_sec,
            retries: 1,
            failures: 0,
            worker_threads: 2,
            rep_wall_ms: vec![],
            requests: 10,
            max_in_flight: 4,
            median_latency_ms: None,
            p95_latency_ms: None,
            inject_delay_ms: 0.0,
        }
    }

    fn read(path: &Path) -> String {
        std::fs::read_to_string(path).unwrap()
    }

    #[test]
    fn csv_examples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");

        write_csv(&[], &path).unwrap();
        assert_eq!(read(&path), "experiment,partitions,async_factor,rows,wall_ms,rows_per_sec,retries,failures\n");

        write_csv(&[row("async-sweep", 50.0)], &path).unwrap();
        let text = read(&path);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "async-sweep,2,4,100,2000.000,50.000,1,0");

        write_csv(&[row("a,b", 50.0)], &path).unwrap();
        assert!(read(&path).lines().nth(1).unwrap().starts_with("\"a,b\",2,"));
    }

    #[test]
    fn ratios_normalize_to_first() {
        let r = ratios(&[row("x", 10.0), row("x", 25.0), row("x", 80.0)]);
        assert_eq!(r, vec![1.0, 2.5, 8.0]);
        assert!(ratios(&[]).is_empty());
    }

    #[test]
    fn spec_validation() {
        let mut spec = ExperimentSpec::new(ExperimentKind::AsyncSweep, ServiceKind::Sentiment, "http://h");
        assert!(spec.validate().is_ok());
        spec.reps = 2;
        assert!(spec.validate().is_err());
        spec.reps = 3;
        spec.rows = 50;
        assert!(spec.validate().is_err());
        spec.rows = 100;
        spec.batch_size = 11;
        assert!(spec.validate().is_err());
        let ocr = ExperimentSpec::new(ExperimentKind::Throughput, ServiceKind::Ocr, "http://h");
        assert_eq!(ocr.batch_size, 1);
    }

    #[test]
    fn synthetic_tables_fit_their_service() {
        for kind in ServiceKind::ALL {
            let t = synthetic_table(kind, 5, 1).unwrap();
            assert_eq!(t.num_rows(), 5);
            assert_eq!(t.column_names(), vec![input_column(kind)]);
        }
        assert_eq!(synthetic_table(ServiceKind::Sentiment, 20, 3), synthetic_table(ServiceKind::Sentiment, 20, 3));
    }

    #[test]
    fn sidecar_path() {
        assert_eq!(latency_sidecar_path(Path::new("/x/results.csv")), Path::new("/x/results.latency.csv"));
    }

    #[test]
    fn sync_vs_async_floor_depends_on_service() {
        let mut spec = ExperimentSpec::new(ExperimentKind::Throughput, ServiceKind::Ocr, "http://h");
        let rows = [row("s", 10.0), row("s", 15.0)];
        assert!(!check_thresholds(&spec, &rows, None)[0].passed);
        spec.service = ServiceKind::Sentiment;
        assert!(check_thresholds(&spec, &rows, None)[0].passed);
    }
}
