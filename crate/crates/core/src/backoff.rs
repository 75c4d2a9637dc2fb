use std::time::Duration;

use rand::Rng;

/// Exponential backoff with multiplicative jitter.
///
/// The nominal delay for retry `n` (zero based) is `initial * factor^n`,
/// capped at `cap`; the actual delay is the nominal one scaled by a uniform
/// factor in `[1 - jitter, 1 + jitter]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub initial: Duration,
    pub factor: f64,
    pub cap: Duration,
    pub jitter: f64,
}

impl Backoff {
    /// Retry policy for a temporarily unreachable broker.
    pub const BROKER: Backoff = Backoff {
        initial: Duration::from_millis(100),
        factor: 2.0,
        cap: Duration::from_secs(10),
        jitter: 0.2,
    };

    /// Status polling policy for clients.
    pub const POLL: Backoff = Backoff {
        initial: Duration::from_secs(1),
        factor: 1.5,
        cap: Duration::from_secs(30),
        jitter: 0.2,
    };

    pub fn nominal(&self, retry: u32) -> Duration {
        let secs = self.initial.as_secs_f64() * self.factor.powi(retry.min(1024) as i32);
        Duration::from_secs_f64(secs.min(self.cap.as_secs_f64()))
    }

    pub fn delay(&self, retry: u32) -> Duration {
        let nominal = self.nominal(retry).as_secs_f64();
        let scale = if self.jitter > 0.0 {
            rand::thread_rng().gen_range(1.0 - self.jitter..=1.0 + self.jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64((nominal * scale).max(0.0))
    }

    /// Runs `op` until it succeeds, fails with an error `retryable` rejects,
    /// or `max_retries` retries have been spent.
    pub fn retry<T, E>(
        &self,
        max_retries: u32,
        retryable: impl Fn(&E) -> bool,
        mut op: impl FnMut() -> Result<T, E>,
    ) -> Result<T, E> {
        let mut retry = 0;
        loop {
            match op() {
                Err(e) if retry < max_retries && retryable(&e) => {
                    std::thread::sleep(self.delay(retry));
                    retry += 1;
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nominal_growth_and_cap() {
        let b = Backoff::BROKER;
        assert_eq!(b.nominal(0), Duration::from_millis(100));
        assert_eq!(b.nominal(3), Duration::from_millis(800));
        assert_eq!(b.nominal(20), Duration::from_secs(10));
        assert_eq!(b.nominal(u32::MAX), Duration::from_secs(10));
    }

    #[test]
    fn jitter_stays_in_band() {
        let b = Backoff::POLL;
        for retry in 0..12 {
            let nominal = b.nominal(retry).as_secs_f64();
            for _ in 0..50 {
                let d = b.delay(retry).as_secs_f64();
                assert!(d >= nominal * 0.8 - 1e-9 && d <= nominal * 1.2 + 1e-9);
            }
        }
    }

    #[test]
    fn retry_gives_up() {
        let fast = Backoff { initial: Duration::from_millis(1), factor: 1.0, cap: Duration::from_millis(1), jitter: 0.0 };
        let mut calls = 0;
        let r: Result<(), &str> = fast.retry(3, |_| true, || {
            calls += 1;
            Err("down")
        });
        assert!(r.is_err());
        assert_eq!(calls, 4);

        calls = 0;
        let r: Result<(), &str> = fast.retry(3, |e| *e != "fatal", || {
            calls += 1;
            Err("fatal")
        });
        assert!(r.is_err());
        assert_eq!(calls, 1);
    }
}
