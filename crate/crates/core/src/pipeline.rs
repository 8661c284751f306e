//! Two-stage pipeline sizing and proxy-side admission control.
//!
//! For stages X and Y with per-request execution times `t_x < t_y`, a stage
//! X running `k` workers emits one output every `t_x / k` ticks. Assigning
//! `ceil(k * t_y / t_x)` instances to stage Y lets it absorb that rate with
//! no internal queueing, so both stages settle to the same output rate and
//! every request's latency is exactly `t_x + t_y` plus transfer time.
//!
//! The proxy enforces the matching admission limit with a token bucket of
//! rate `k / t_x` and burst 1, evaluated in exact rational arithmetic so
//! steady-state assertions hold with zero tolerance.

use num_rational::Ratio;

use crate::Tick;

/// Exact requests-per-tick (or ticks-per-request) quantity.
pub type Rate = Ratio<i64>;

/// Instances required at the downstream stage so its output rate matches an
/// upstream stage of `k` workers: `ceil(k * t_y / t_x)`.
pub fn required_instances(t_x: Tick, t_y: Tick, k: u32) -> u32 {
    assert!(t_x > 0 && t_y > 0 && k >= 1);
    let num = k as u64 * t_y;
    num.div_ceil(t_x) as u32
}

/// Steady-state ticks between consecutive outputs of a stage with `k`
/// workers and execution time `t_x`: exactly `t_x / k`.
pub fn steady_output_interval(t_x: Tick, k: u32) -> Rate {
    assert!(t_x > 0 && k >= 1);
    Ratio::new(t_x as i64, k as i64)
}

/// End-to-end latency of one request through a two-stage pipeline with
/// measured transfer time: `t_x + t_y + network`.
pub fn end_to_end_latency(t_x: Tick, t_y: Tick, network: Tick) -> Tick {
    t_x + t_y + network
}

/// Outcome of one admission decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Accept,
    Reject,
}

/// Proxy-side request monitor: a token bucket with rate `k / t_x` and burst
/// 1, in exact arithmetic. The rate is re-read from coordinator state before
/// every decision via [`AdmissionState::set_rate`].
#[derive(Debug, Clone)]
pub struct AdmissionState {
    rate: Rate,
    tokens: Rate,
    last: Tick,
    accepted: u64,
    rejected: u64,
}

impl AdmissionState {
    /// Starts with a full burst so the first request is admitted.
    pub fn new(k: u32, t_x: Tick) -> Self {
        Self {
            rate: Ratio::new(k as i64, t_x as i64),
            tokens: Ratio::new(1, 1),
            last: 0,
            accepted: 0,
            rejected: 0,
        }
    }

    /// Updates the rate limit after the worker count or stage time changed.
    /// Accrued tokens are kept; accrual uses the new rate from `now` on.
    pub fn set_rate(&mut self, k: u32, t_x: Tick, now: Tick) {
        self.refill(now);
        self.rate = Ratio::new(k as i64, t_x as i64);
    }

    pub fn rate(&self) -> Rate {
        self.rate
    }

    fn refill(&mut self, now: Tick) {
        debug_assert!(now >= self.last);
        let elapsed = Ratio::new((now - self.last) as i64, 1);
        self.tokens = (self.tokens + elapsed * self.rate).min(Ratio::new(1, 1));
        self.last = now;
    }

    /// Admits the request iff doing so keeps the accepted rate at or below
    /// the limit over the sliding window.
    pub fn fast_reject(&mut self, now: Tick) -> Admission {
        self.refill(now);
        if self.tokens >= Ratio::new(1, 1) {
            self.tokens -= Ratio::new(1, 1);
            self.accepted += 1;
            Admission::Accept
        } else {
            self.rejected += 1;
            Admission::Reject
        }
    }

    pub fn counts(&self) -> (u64, u64) {
        (self.accepted, self.rejected)
    }
}
