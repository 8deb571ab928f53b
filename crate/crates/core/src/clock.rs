//! Process-local monotonic clock in nanoseconds.
//!
//! Timestamps from this clock are only meaningful inside the process that
//! produced them; peers echo them back verbatim instead of interpreting them.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

fn epoch() -> Instant {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    *EPOCH.get_or_init(Instant::now)
}

/// Nanoseconds elapsed since the first call in this process.
pub fn now_ns() -> u64 {
    epoch().elapsed().as_nanos() as u64
}

/// The [`Instant`] corresponding to a timestamp returned by [`now_ns`].
pub fn instant_at(ts_ns: u64) -> Instant {
    epoch() + Duration::from_nanos(ts_ns)
}

/// Sleep until the monotonic timestamp `deadline_ns`; returns immediately if it
/// has already passed.
pub fn sleep_until_ns(deadline_ns: u64) {
    let now = now_ns();
    if deadline_ns > now {
        std::thread::sleep(Duration::from_nanos(deadline_ns - now));
    }
}

pub fn ns_to_ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

pub fn ms_to_ns(ms: f64) -> u64 {
    if ms <= 0.0 {
        0
    } else {
        (ms * 1e6).round() as u64
    }
}
