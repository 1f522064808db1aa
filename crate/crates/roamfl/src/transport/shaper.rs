use std::io;
use std::time::{Duration, Instant};

use super::ByteSink;

/// Bytes a link may send back-to-back before the rate limit applies.
pub const BURST_BYTES: f64 = 16.0 * 1024.0;

/// Token bucket measured in bytes, refilled at `bits_per_sec / 8`.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    bytes_per_sec: f64,
    burst: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(bits_per_sec: f64, now: Instant) -> Self {
        Self {
            bytes_per_sec: bits_per_sec / 8.0,
            burst: BURST_BYTES,
            tokens: BURST_BYTES,
            last: now,
        }
    }

    fn refill(&mut self, now: Instant) {
        let dt = now.saturating_duration_since(self.last).as_secs_f64();
        self.tokens = (self.tokens + dt * self.bytes_per_sec).min(self.burst);
        self.last = now;
    }

    /// Takes `n` bytes (at most one burst) and returns how long to wait before they may go out.
    pub fn take(&mut self, n: usize, now: Instant) -> Duration {
        self.refill(now);
        self.tokens -= n as f64;
        if self.tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-self.tokens / self.bytes_per_sec)
        }
    }
}

/// Rate-limits and delays writes to emulate a slower link.
pub struct LinkShaper {
    inner: Box<dyn ByteSink>,
    bucket: Option<TokenBucket>,
    latency: Duration,
}

impl LinkShaper {
    pub fn new(inner: Box<dyn ByteSink>, bits_per_sec: Option<f64>, latency: Duration) -> Self {
        let bucket = bits_per_sec
            .filter(|b| *b > 0.0)
            .map(|b| TokenBucket::new(b, Instant::now()));
        Self {
            inner,
            bucket,
            latency,
        }
    }
}

impl ByteSink for LinkShaper {
    /// Each call carries one frame, so latency is charged once per frame.
    fn write_all(&mut self, bytes: &[u8]) -> io::Result<()> {
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let Some(bucket) = &mut self.bucket else {
            return self.inner.write_all(bytes);
        };
        for chunk in bytes.chunks(BURST_BYTES as usize) {
            let wait = bucket.take(chunk.len(), Instant::now());
            if !wait.is_zero() {
                std::thread::sleep(wait);
            }
            self.inner.write_all(chunk)?;
        }
        Ok(())
    }

    fn close(&mut self) {
        self.inner.close();
    }
}
