use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Exponential backoff: the delay before retry `i` is
/// `min(base * 2^i, max)`, so delays never decrease.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 4, base_delay_ms: 500, max_delay_ms: 8_000 }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.min(63)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Token bucket shared by all callers of a gateway; `acquire` blocks until a
/// token is available.
pub struct TokenBucket {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(per_second: f64, burst: u32) -> Self {
        assert!(per_second > 0.0 && burst > 0, "rate and burst must be positive");
        let capacity = f64::from(burst);
        Self { capacity, per_second, state: Mutex::new((capacity, Instant::now())) }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().unwrap();
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.per_second;
                st.0 = (st.0 + refill).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - st.0) / self.per_second)
            };
            std::thread::sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delays_are_capped_and_monotone() {
        let p = RetryPolicy { max_retries: 70, base_delay_ms: 3, max_delay_ms: 1000 };
        let d: Vec<_> = (0..70).map(|i| p.delay(i)).collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(d[0], Duration::from_millis(3));
        assert_eq!(*d.last().unwrap(), Duration::from_millis(1000));
    }

    #[test]
    fn bucket_throttles_after_burst() {
        let b = TokenBucket::new(200.0, 2);
        let start = Instant::now();
        for _ in 0..6 {
            b.acquire();
        }
        // 2 free tokens, then 4 more at 5 ms each
        assert!(start.elapsed() >= Duration::from_millis(15));
    }
}
