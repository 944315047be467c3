use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Spaces calls at least `interval` apart, serving callers in arrival order.
///
/// Each caller reserves the next free slot under the lock and then sleeps
/// until it comes up, so no caller can overtake one that arrived earlier.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(interval: Duration) -> Self {
        RateLimiter {
            interval,
            next_slot: Mutex::new(None),
        }
    }

    pub fn per_minute(requests: u32) -> Self {
        Self::new(Duration::from_secs(60) / requests.max(1))
    }

    /// Reserves a slot without waiting for it.
    pub fn reserve(&self) -> Instant {
        let now = Instant::now();
        let mut next = self.next_slot.lock().unwrap_or_else(|e| e.into_inner());
        let slot = next.map_or(now, |n| n.max(now));
        *next = Some(slot + self.interval);
        slot
    }

    pub fn acquire(&self) {
        let slot = self.reserve();
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_are_spaced_and_ordered() {
        let limiter = RateLimiter::new(Duration::from_millis(10));
        let a = limiter.reserve();
        let b = limiter.reserve();
        let c = limiter.reserve();
        assert!(b - a >= Duration::from_millis(10));
        assert!(c - b >= Duration::from_millis(10));
    }

    #[test]
    fn concurrent_callers_are_all_served() {
        let limiter = RateLimiter::new(Duration::from_millis(5));
        let start = Instant::now();
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| limiter.acquire());
            }
        });
        assert!(start.elapsed() >= Duration::from_millis(15));
    }
}
