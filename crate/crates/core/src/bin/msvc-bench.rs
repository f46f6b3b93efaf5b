use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use msvc::bench::{
    check_thresholds, input_schema, latency_sidecar_path, ratios, run, write_csv, write_latency_csv, ExperimentKind,
    ExperimentSpec, MeasurementRow,
};
use msvc::mockserver::{serve, MockServer, ServerConfig};
use msvc::reliability::RetryPolicy;
use msvc::services::ServiceKind;
use msvc::table::from_json_lines;
use msvc::transformer::PipelineConfig;

#[derive(Parser)]
#[command(name = "msvc-bench", about = "Throughput and latency experiments")]
struct Cli {
    #[command(subcommand)]
    experiment: Experiment,
}

#[derive(Subcommand)]
enum Experiment {
    /// Throughput as a function of partition count.
    PartitionSweep(Args),
    /// Throughput as a function of the async factor.
    AsyncSweep(Args),
    /// Request latency, local against remote with injected delay.
    Latency(Args),
    /// Throughput at A=1 against A=8.
    SyncVsAsync(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long, default_value_t = 1000)]
    rows: usize,
    #[arg(long, default_value = "sentiment")]
    service: ServiceKind,
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    server: String,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    partitions: Vec<usize>,
    #[arg(long = "async", value_delimiter = ',', default_value = "1")]
    async_factors: Vec<usize>,
    /// Defaults to the largest partition count.
    #[arg(long)]
    workers: Option<usize>,
    /// Defaults to the service maximum.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 50)]
    warmup_rows: usize,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Start an in-process mock instead of using --server.
    #[arg(long)]
    spawn_mock: bool,
    /// Compute latency of the spawned mock.
    #[arg(long, default_value_t = 0.0)]
    latency_ms: f64,
    /// Client-side delay for the remote preset of the latency experiment.
    #[arg(long, default_value_t = 50)]
    inject_delay_ms: u64,
    /// Exit with status 2 when a threshold check fails.
    #[arg(long)]
    assert: bool,
    /// JSON-lines input with a column named after the service input.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Pipeline definition to run instead of a single service.
    #[arg(long)]
    pipeline: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    max_retries: u32,
    #[arg(long, default_value_t = 100)]
    base_delay_ms: u64,
    #[arg(long, default_value_t = 2.0)]
    backoff_mult: f64,
    #[arg(long, default_value_t = 0.2)]
    jitter: f64,
    #[arg(long, default_value_t = 30_000)]
    max_delay_ms: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("msvc-bench: {msg}");
    ExitCode::FAILURE
}

fn print_rows(rows: &[MeasurementRow]) {
    println!(
        "{:<22} {:>4} {:>4} {:>7} {:>11} {:>11} {:>7} {:>8} {:>7}",
        "experiment", "P", "A", "rows", "wall_ms", "rows/s", "retries", "failures", "ratio"
    );
    for (r, ratio) in rows.iter().zip(ratios(rows)) {
        println!(
            "{:<22} {:>4} {:>4} {:>7} {:>11.1} {:>11.1} {:>7} {:>8} {:>7.2}",
            r.experiment, r.partitions, r.async_factor, r.rows, r.wall_ms, r.rows_per_sec, r.retries, r.failures, ratio
        );
        if let (Some(m), Some(p95)) = (r.median_latency_ms, r.p95_latency_ms) {
            println!("{:<22} median latency {m:.2} ms, p95 {p95:.2} ms", "");
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .init();
    let (kind, args) = match Cli::parse().experiment {
        Experiment::PartitionSweep(a) => (ExperimentKind::PartitionSweep, a),
        Experiment::AsyncSweep(a) => (ExperimentKind::AsyncSweep, a),
        Experiment::Latency(a) => (ExperimentKind::Latency, a),
        Experiment::SyncVsAsync(a) => (ExperimentKind::Throughput, a),
    };

    let mut spec = ExperimentSpec::new(kind, args.service, args.server.clone());
    spec.rows = args.rows;
    spec.partitions = args.partitions.clone();
    spec.async_factors = args.async_factors.clone();
    spec.worker_threads = args.workers;
    spec.batch_size = args.batch_size.unwrap_or(args.service.max_batch());
    spec.reps = args.reps;
    spec.warmup_rows = args.warmup_rows;
    spec.inject_delay = Duration::from_millis(args.inject_delay_ms);
    spec.seed = args.seed;
    spec.retry_policy = RetryPolicy {
        max_retries: args.max_retries,
        base_delay: Duration::from_millis(args.base_delay_ms),
        multiplier: args.backoff_mult,
        jitter_fraction: args.jitter,
        max_delay: Duration::from_millis(args.max_delay_ms),
        ..RetryPolicy::default()
    };

    // servers must outlive the experiment
    let mut _servers: Vec<MockServer> = Vec::new();
    if args.spawn_mock {
        let count = if kind == ExperimentKind::Latency { 2 } else { 1 };
        for _ in 0..count {
            match serve(ServerConfig::with_latency_ms(args.latency_ms)).await {
                Ok(s) => _servers.push(s),
                Err(e) => return fail(e),
            }
        }
        spec.server_url = _servers[0].base_url();
        spec.remote_url = _servers.get(1).map(MockServer::base_url);
    }

    if let Some(path) = &args.input {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) => return fail(format!("{}: {e}", path.display())),
        };
        match from_json_lines(BufReader::new(file), input_schema(args.service), 1) {
            Ok(t) => spec.input = Some(t),
            Err(e) => return fail(e),
        }
    }
    if let Some(path) = &args.pipeline {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return fail(format!("{}: {e}", path.display())),
        };
        match PipelineConfig::from_json(&text).and_then(|c| c.build(Some(&spec.server_url))) {
            Ok(p) => spec.pipeline = Some(p),
            Err(e) => return fail(e),
        }
    }

    let rows = match run(&spec).await {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    print_rows(&rows);
    if let Err(e) = write_csv(&rows, &args.out) {
        return fail(e);
    }
    if kind == ExperimentKind::Latency {
        let sidecar = latency_sidecar_path(&args.out);
        if let Err(e) = write_latency_csv(&rows, args.service, &sidecar) {
            return fail(e);
        }
        println!("wrote {} and {}", args.out.display(), sidecar.display());
    } else {
        println!("wrote {}", args.out.display());
    }

    if args.assert {
        let configured = args.spawn_mock.then_some(args.latency_ms);
        let checks = check_thresholds(&spec, &rows, configured);
        for c in &checks {
            println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        if checks.iter().any(|c| !c.passed) {
            return ExitCode::from(2);
        }
    }
    ExitCode::SUCCESS
}
