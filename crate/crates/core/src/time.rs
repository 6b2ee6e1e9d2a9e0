//! Simulated time and work quantities.
//!
//! All simulator arithmetic runs on integer grids: time in microseconds and
//! work in micro-megabytes (1 unit = 1e-6 MB). A core with a capacity of
//! `c` MB/s retires `c` work units per microsecond, so durations are plain
//! integer divisions rounded up to the next whole microsecond.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::ops::{Add, Sub};

const MICROS_PER_SEC: f64 = 1_000_000.0;

/// A point (or span) on the simulated clock, held in whole microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    /// Rounds to the nearest microsecond. Negative or NaN input clamps to zero.
    pub fn from_secs_f64(secs: f64) -> Self {
        if secs.is_nan() || secs <= 0.0 {
            return SimTime::ZERO;
        }
        SimTime((secs * MICROS_PER_SEC).round() as u64)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_SEC
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

// On the wire a SimTime is a number of seconds.
impl Serialize for SimTime {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_secs_f64())
    }
}

impl<'de> Deserialize<'de> for SimTime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let secs = f64::deserialize(d)?;
        if secs < 0.0 || !secs.is_finite() {
            return Err(serde::de::Error::custom(format!("invalid time {secs}")));
        }
        Ok(SimTime::from_secs_f64(secs))
    }
}

/// An amount of data on the micro-megabyte grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Work(u64);

impl Work {
    pub const ZERO: Work = Work(0);

    pub const fn from_units(units: u64) -> Self {
        Work(units)
    }

    pub fn from_mb(mb: f64) -> Self {
        if mb.is_nan() || mb <= 0.0 {
            return Work::ZERO;
        }
        Work((mb * 1_000_000.0).round() as u64)
    }

    pub const fn units(self) -> u64 {
        self.0
    }

    pub fn as_mb(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }

    /// Applies a dimensionless cost multiplier, staying on the grid.
    pub fn scaled(self, factor: f64) -> Work {
        Work((self.0 as f64 * factor).round() as u64)
    }

    /// Time to process this much work at `capacity` MB/s, rounded up so
    /// that any non-zero work takes at least one microsecond.
    pub fn duration_at(self, capacity: f64) -> SimTime {
        SimTime((self.0 as f64 / capacity).ceil() as u64)
    }

    /// Work retired by `elapsed` at `capacity` MB/s, capped at `self`.
    pub fn done_within(self, elapsed: SimTime, capacity: f64) -> Work {
        let done = (elapsed.as_micros() as f64 * capacity).floor() as u64;
        Work(done.min(self.0))
    }

    pub fn saturating_sub(self, other: Work) -> Work {
        Work(self.0.saturating_sub(other.0))
    }
}

impl Add for Work {
    type Output = Work;
    fn add(self, rhs: Work) -> Work {
        Work(self.0 + rhs.0)
    }
}

impl fmt::Display for Work {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}MB", self.as_mb())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seconds_round_trip_on_the_microsecond_grid() {
        for us in [0u64, 1, 5_000, 1_250_000, 123_456_789] {
            let t = SimTime::from_micros(us);
            assert_eq!(SimTime::from_secs_f64(t.as_secs_f64()), t);
        }
    }

    #[test]
    fn durations_follow_capacity() {
        assert_eq!(
            Work::from_mb(200.0).duration_at(400.0),
            SimTime::from_micros(500_000)
        );
        assert_eq!(
            Work::from_mb(100.0).duration_at(80.0),
            SimTime::from_micros(1_250_000)
        );
        assert_eq!(Work::ZERO.duration_at(80.0), SimTime::ZERO);
        assert_eq!(
            Work::from_units(1).duration_at(400.0),
            SimTime::from_micros(1)
        );
    }

    #[test]
    fn done_within_is_capped() {
        let w = Work::from_mb(100.0);
        assert_eq!(
            w.done_within(SimTime::from_micros(750_000), 80.0),
            Work::from_mb(60.0)
        );
        assert_eq!(w.done_within(SimTime::from_micros(10_000_000), 80.0), w);
    }
}
