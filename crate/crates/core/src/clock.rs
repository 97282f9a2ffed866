//! Simulated and wall clocks.

use std::time::{Duration, Instant};

/// Source of "now" for the emulator. Delays such as optical switching are
/// charged through [`Clock::charge`].
pub trait Clock {
    /// Seconds since the clock's origin.
    fn now(&self) -> f64;
    /// Spend `seconds` of time.
    fn charge(&mut self, seconds: f64);
    /// Move forward to `t` if it lies in the future.
    fn advance_to(&mut self, t: f64) {
        let now = self.now();
        if t > now {
            self.charge(t - now);
        }
    }
}

/// Deterministic clock that only moves when charged.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimClock {
    now: f64,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(t: f64) -> Self {
        Self { now: t }
    }
}

impl Clock for SimClock {
    fn now(&self) -> f64 {
        self.now
    }

    fn charge(&mut self, seconds: f64) {
        debug_assert!(seconds >= 0.0);
        self.now += seconds;
    }

    fn advance_to(&mut self, t: f64) {
        if t > self.now {
            self.now = t;
        }
    }
}

/// Real time. Charging a delay sleeps the calling thread.
#[derive(Debug, Clone, Copy)]
pub struct WallClock {
    origin: Instant,
    offset: f64,
}

impl WallClock {
    pub fn new() -> Self {
        Self::starting_at(0.0)
    }

    /// Reads `t` now and advances in real time from there.
    pub fn starting_at(t: f64) -> Self {
        Self {
            origin: Instant::now(),
            offset: t,
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.offset + self.origin.elapsed().as_secs_f64()
    }

    fn charge(&mut self, seconds: f64) {
        if seconds > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(seconds));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_clock_moves_only_forward() {
        let mut c = SimClock::new();
        c.charge(0.025);
        c.advance_to(0.01);
        assert_eq!(c.now(), 0.025);
        c.advance_to(2.0);
        assert_eq!(c.now(), 2.0);
    }

    #[test]
    fn wall_clock_sleeps() {
        let mut c = WallClock::new();
        let before = c.now();
        c.charge(0.005);
        assert!(c.now() - before >= 0.004);
    }
}
