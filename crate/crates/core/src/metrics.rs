//! Counters shared by the engine and the retry layer.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;

/// Job-wide counters. All updates are lock-free except the status histogram
/// and latency samples.
#[derive(Debug, Default)]
pub struct Metrics {
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    rows: AtomicU64,
    failures: AtomicU64,
    requests: AtomicU64,
    retries: AtomicU64,
    transport_errors: AtomicU64,
    status_counts: Mutex<BTreeMap<u16, u64>>,
    latencies: Mutex<Vec<Duration>>,
}

/// Decrements the in-flight gauge on drop.
pub struct InFlightGuard<'a>(&'a Metrics);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks one operation as pending and updates the high-water mark.
    pub fn enter(&self) -> InFlightGuard<'_> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlightGuard(self)
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn add_rows(&self, n: u64) {
        self.rows.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_failures(&self, n: u64) {
        self.failures.fetch_add(n, Ordering::Relaxed);
    }

    pub fn record_response(&self, status: u16, latency: Duration) {
        self.requests.fetch_add(1, Ordering::Relaxed);
        *self.status_counts.lock().unwrap().entry(status).or_default() += 1;
        self.latencies.lock().unwrap().push(latency);
    }

    pub fn record_transport_error(&self) {
        self.requests.fetch_add(1, Ordering::Relaxed);
        self.transport_errors.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_retry(&self) {
        self.retries.fetch_add(1, Ordering::Relaxed);
    }

    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    pub fn failures(&self) -> u64 {
        self.failures.load(Ordering::Relaxed)
    }

    /// Latency samples of every response received so far.
    pub fn latencies(&self) -> Vec<Duration> {
        self.latencies.lock().unwrap().clone()
    }

    pub fn snapshot(&self, wall: Duration) -> MetricsSnapshot {
        MetricsSnapshot {
            total_rows: self.rows.load(Ordering::Relaxed),
            wall_ms: wall.as_secs_f64() * 1000.0,
            requests: self.requests.load(Ordering::Relaxed),
            status_counts: self.status_counts.lock().unwrap().clone(),
            transport_errors: self.transport_errors.load(Ordering::Relaxed),
            retries: self.retries(),
            failures: self.failures(),
            max_in_flight: self.max_in_flight(),
        }
    }
}

/// Plain record of a finished job.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSnapshot {
    pub total_rows: u64,
    pub wall_ms: f64,
    pub requests: u64,
    pub status_counts: BTreeMap<u16, u64>,
    pub transport_errors: u64,
    pub retries: u64,
    pub failures: u64,
    pub max_in_flight: usize,
}

/// Median of a sample; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    percentile(values, 50.0)
}

/// Linear-interpolated percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn high_water_mark() {
        let m = Metrics::new();
        let a = m.enter();
        let b = m.enter();
        assert_eq!(m.in_flight(), 2);
        drop(a);
        let _c = m.enter();
        drop(b);
        assert_eq!(m.in_flight(), 1);
        assert_eq!(m.max_in_flight(), 2);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 100.0), Some(5.0));
    }
}
