//! Sliding-log rate limiter keyed by client address and endpoint class.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

pub const WINDOW: Duration = Duration::from_secs(60);

pub trait Clock: Send + Sync {
    fn now(&self) -> Instant;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Instant {
        Instant::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug)]
pub struct ManualClock {
    base: Instant,
    offset_ms: AtomicU64,
}

impl ManualClock {
    pub fn new() -> Self {
        Self {
            base: Instant::now(),
            offset_ms: AtomicU64::new(0),
        }
    }

    pub fn advance(&self, by: Duration) {
        self.offset_ms.fetch_add(by.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Default for ManualClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Instant {
        self.base + Duration::from_millis(self.offset_ms.load(Ordering::SeqCst))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LimitClass {
    /// Session, thread and chat endpoints.
    Chat,
    Feedback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rejected {
    pub retry_after: Duration,
}

impl Rejected {
    /// Whole seconds for the Retry-After header, never zero.
    pub fn retry_after_secs(&self) -> u64 {
        let ms = self.retry_after.as_millis() as u64;
        ms.div_ceil(1000).max(1)
    }
}

const SWEEP_EVERY: u64 = 1024;

pub struct RateLimiter {
    limits: HashMap<LimitClass, usize>,
    window: Duration,
    clock: Arc<dyn Clock>,
    log: Mutex<HashMap<(LimitClass, String), VecDeque<Instant>>>,
    checks: AtomicU64,
}

impl RateLimiter {
    pub fn new(chat_per_window: usize, feedback_per_window: usize) -> Self {
        Self {
            limits: HashMap::from([(LimitClass::Chat, chat_per_window), (LimitClass::Feedback, feedback_per_window)]),
            window: WINDOW,
            clock: Arc::new(SystemClock),
            log: Mutex::new(HashMap::new()),
            checks: AtomicU64::new(0),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn limit(&self, class: LimitClass) -> usize {
        self.limits[&class]
    }

    /// Records the request if the key is under its limit.
    pub fn check(&self, class: LimitClass, key: &str) -> Result<(), Rejected> {
        let now = self.clock.now();
        let limit = self.limit(class);
        let mut log = self.log.lock();
        if self.checks.fetch_add(1, Ordering::Relaxed) % SWEEP_EVERY == SWEEP_EVERY - 1 {
            let window = self.window;
            log.retain(|_, stamps| stamps.back().is_some_and(|t| now.duration_since(*t) < window));
        }
        let stamps = log.entry((class, key.to_string())).or_default();
        while stamps.front().is_some_and(|t| now.duration_since(*t) >= self.window) {
            stamps.pop_front();
        }
        if stamps.len() >= limit {
            let oldest = *stamps.front().expect("non-empty when at limit");
            return Err(Rejected {
                retry_after: (oldest + self.window).saturating_duration_since(now),
            });
        }
        stamps.push_back(now);
        Ok(())
    }

    pub fn tracked_keys(&self) -> usize {
        self.log.lock().len()
    }
}
