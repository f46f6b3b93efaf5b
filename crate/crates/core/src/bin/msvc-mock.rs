use std::collections::BTreeMap;

use clap::{Parser, Subcommand, ValueEnum};
use msvc::mockserver::{serve, LatencyModel, RateLimit, ServerConfig};

#[derive(Parser)]
#[command(name = "msvc-mock", about = "Local mock service fleet")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve every service route until interrupted.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LatencyDist {
    Constant,
    Exponential,
}

#[derive(clap::Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Service compute latency (constant) or its mean (exponential).
    #[arg(long, default_value_t = 0.0)]
    latency_ms: f64,
    #[arg(long, value_enum, default_value_t = LatencyDist::Constant)]
    latency_dist: LatencyDist,
    /// Per-route constant latency, e.g. `/vision/ocr=200`. Overrides --latency-ms.
    #[arg(long = "route-latency", value_parser = parse_route)]
    route_latency: Vec<(String, f64)>,
    /// Token bucket capacity; omit to disable rate limiting.
    #[arg(long)]
    rate_limit: Option<u32>,
    /// Tokens added per second; defaults to the capacity.
    #[arg(long)]
    refill: Option<f64>,
    #[arg(long, default_value_t = 1)]
    retry_after: u64,
    #[arg(long, default_value_t = 0.0)]
    fail_prob: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn parse_route(s: &str) -> Result<(String, f64), String> {
    let (path, ms) = s.split_once('=').ok_or("expected PATH=MS")?;
    let ms: f64 = ms.parse().map_err(|e| format!("bad latency `{ms}`: {e}"))?;
    Ok((path.to_owned(), ms))
}

impl ServeArgs {
    fn config(&self) -> ServerConfig {
        let base = match self.latency_dist {
            LatencyDist::Constant => LatencyModel::Constant { ms: self.latency_ms },
            LatencyDist::Exponential => LatencyModel::Exponential { mean_ms: self.latency_ms },
        };
        let latency = if self.route_latency.is_empty() {
            base
        } else {
            let routes: BTreeMap<_, _> = self
                .route_latency
                .iter()
                .map(|(p, ms)| (p.clone(), LatencyModel::Constant { ms: *ms }))
                .collect();
            LatencyModel::PerEndpoint(routes)
        };
        ServerConfig {
            port: self.port,
            latency,
            rate_limit: self.rate_limit.map(|capacity| RateLimit {
                capacity,
                refill_per_sec: self.refill.unwrap_or(f64::from(capacity)),
                retry_after_secs: self.retry_after,
            }),
            fail_prob: self.fail_prob,
            seed: self.seed,
        }
    }
}

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .init();
    let Command::Serve(args) = Cli::parse().command;
    let server = match serve(args.config()).await {
        Ok(s) => s,
        Err(e) => {
            eprintln!("msvc-mock: {e}");
            std::process::exit(1);
        }
    };
    println!("listening on {}", server.base_url());
    let _ = tokio::signal::ctrl_c().await;
    server.shutdown().await;
}
