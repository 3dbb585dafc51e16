use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Monotonic time source with sleeping, so retry and rate-limit timing can
/// run on a manual clock in tests.
pub trait Clock: Send + Sync {
    /// Time since an arbitrary fixed origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

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

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Clock that only moves when slept on. Records every sleep.
#[derive(Default)]
pub struct ManualClock {
    state: Mutex<(Duration, Vec<Duration>)>,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.state.lock().unwrap().1.clone()
    }

    pub fn advance(&self, d: Duration) {
        self.state.lock().unwrap().0 += d;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        self.state.lock().unwrap().0
    }

    fn sleep(&self, d: Duration) {
        let mut state = self.state.lock().unwrap();
        state.0 += d;
        state.1.push(d);
    }
}

/// Spaces request starts at least `1/rps` apart, which keeps any one-second
/// window at or below `rps + 1` requests.
pub struct RateLimiter {
    interval: Option<Duration>,
    next_slot: Mutex<Duration>,
}

impl RateLimiter {
    /// `rps <= 0` disables limiting.
    pub fn new(rps: f64) -> Self {
        let interval = (rps > 0.0 && rps.is_finite()).then(|| Duration::from_secs_f64(1.0 / rps));
        RateLimiter {
            interval,
            next_slot: Mutex::new(Duration::ZERO),
        }
    }

    pub fn acquire(&self, clock: &dyn Clock) {
        let Some(interval) = self.interval else {
            return;
        };
        let wait = {
            let mut next = self.next_slot.lock().unwrap();
            let now = clock.now();
            let slot = (*next).max(now);
            *next = slot + interval;
            slot - now
        };
        if !wait.is_zero() {
            clock.sleep(wait);
        }
    }
}
