//! Time source for backoff and rate limiting, swappable for a manual clock in tests.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    /// Time elapsed since the clock's origin.
    fn now(&self) -> Duration;
    fn sleep(&self, duration: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Manual clock: `sleep` advances time instantly and is recorded.
#[derive(Debug, Default)]
pub struct MockClock {
    state: Mutex<(Duration, Vec<Duration>)>,
}

impl MockClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, by: Duration) {
        self.state.lock().expect("mock clock poisoned").0 += by;
    }

    /// Every duration passed to `sleep`, in call order.
    pub fn sleeps(&self) -> Vec<Duration> {
        self.state.lock().expect("mock clock poisoned").1.clone()
    }
}

impl Clock for MockClock {
    fn now(&self) -> Duration {
        self.state.lock().expect("mock clock poisoned").0
    }

    fn sleep(&self, duration: Duration) {
        let mut s = self.state.lock().expect("mock clock poisoned");
        s.0 += duration;
        s.1.push(duration);
    }
}

/// Sliding-window limiter: at most `capacity` admissions in any `window`.
pub struct RateLimiter {
    capacity: usize,
    window: Duration,
    admitted: Mutex<VecDeque<Duration>>,
}

impl RateLimiter {
    pub fn per_minute(requests: u32) -> Self {
        Self::new(requests as usize, Duration::from_secs(60))
    }

    pub fn new(capacity: usize, window: Duration) -> Self {
        assert!(capacity > 0, "rate limiter capacity must be positive");
        RateLimiter { capacity, window, admitted: Mutex::new(VecDeque::new()) }
    }

    /// Blocks (on `clock`) until a slot is free, then records the admission.
    pub fn acquire(&self, clock: &dyn Clock) {
        loop {
            let wait = {
                let mut admitted = self.admitted.lock().expect("rate limiter poisoned");
                let now = clock.now();
                while admitted.front().is_some_and(|t| now.saturating_sub(*t) >= self.window) {
                    admitted.pop_front();
                }
                if admitted.len() < self.capacity {
                    admitted.push_back(now);
                    return;
                }
                (admitted[0] + self.window).saturating_sub(now)
            };
            clock.sleep(wait.max(Duration::from_millis(1)));
        }
    }
}
