use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Server-side rate limit settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateLimit {
    pub capacity: u32,
    pub refill_per_sec: f64,
    pub retry_after_secs: u64,
}

/// Token bucket driven by an explicit clock reading, so it can be simulated.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    capacity: f64,
    refill_per_sec: f64,
    tokens: f64,
    last: Duration,
}

impl TokenBucket {
    /// A full bucket whose clock starts at zero.
    pub fn new(capacity: u32, refill_per_sec: f64) -> Self {
        TokenBucket {
            capacity: f64::from(capacity),
            refill_per_sec,
            tokens: f64::from(capacity),
            last: Duration::ZERO,
        }
    }

    pub fn tokens(&self) -> f64 {
        self.tokens
    }

    /// Refills for the time since the last call, then takes one token if
    /// available. Readings earlier than the last one add nothing.
    pub fn admit(&mut self, now: Duration) -> bool {
        let elapsed = now.saturating_sub(self.last);
        self.tokens = (self.tokens + elapsed.as_secs_f64() * self.refill_per_sec).min(self.capacity);
        self.last = self.last.max(now);
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Offers evenly spaced requests for `secs` seconds; returns admitted count.
    fn simulate(capacity: u32, refill: f64, offered_per_sec: f64, secs: f64) -> usize {
        let mut b = TokenBucket::new(capacity, refill);
        let n = (offered_per_sec * secs) as usize;
        (0..n)
            .filter(|i| b.admit(Duration::from_secs_f64(*i as f64 / offered_per_sec)))
            .count()
    }

    #[test]
    fn burst_up_to_capacity() {
        let mut b = TokenBucket::new(5, 10.0);
        let admitted: Vec<bool> = (0..6).map(|_| b.admit(Duration::ZERO)).collect();
        assert_eq!(admitted, vec![true, true, true, true, true, false]);
    }

    #[test]
    fn under_refill_rate_never_rejects() {
        assert_eq!(simulate(5, 10.0, 8.0, 30.0), 240);
    }

    #[test]
    fn over_refill_rate_converges_to_refill() {
        let rate = simulate(5, 10.0, 20.0, 30.0) as f64 / 30.0;
        assert!((rate - 10.0).abs() <= 1.0, "{rate}");
    }

    #[test]
    fn clock_going_backwards_adds_nothing() {
        let mut b = TokenBucket::new(1, 1.0);
        assert!(b.admit(Duration::from_secs(5)));
        assert!(!b.admit(Duration::from_secs(4)));
    }
}
