//! Integer-nanosecond time arithmetic.
//!
//! All absolute times and durations are carried as signed integer nanoseconds
//! so that a multi-hour run at a 10 us cycle period accumulates no rounding
//! error. Configuration files speak microseconds/milliseconds; conversion
//! happens at the boundary.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// A time point or duration in integer nanoseconds.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Nanos(pub i64);

impl Nanos {
    pub const ZERO: Nanos = Nanos(0);

    pub const fn from_nanos(ns: i64) -> Self {
        Nanos(ns)
    }

    pub const fn from_micros(us: i64) -> Self {
        Nanos(us * 1_000)
    }

    pub const fn from_millis(ms: i64) -> Self {
        Nanos(ms * 1_000_000)
    }

    pub const fn from_secs(s: i64) -> Self {
        Nanos(s * 1_000_000_000)
    }

    /// Round a floating-point value in the given unit to whole nanoseconds.
    pub fn from_micros_f64(us: f64) -> Self {
        Nanos((us * 1e3).round() as i64)
    }

    pub fn from_millis_f64(ms: f64) -> Self {
        Nanos((ms * 1e6).round() as i64)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        Nanos((s * 1e9).round() as i64)
    }

    pub const fn as_nanos(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    pub fn as_micros_f64(self) -> f64 {
        self.0 as f64 * 1e-3
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 * 1e-6
    }

    pub const fn is_negative(self) -> bool {
        self.0 < 0
    }

    pub fn abs(self) -> Nanos {
        Nanos(self.0.abs())
    }
}

impl fmt::Debug for Nanos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

impl fmt::Display for Nanos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

impl Add for Nanos {
    type Output = Nanos;
    fn add(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 + rhs.0)
    }
}

impl AddAssign for Nanos {
    fn add_assign(&mut self, rhs: Nanos) {
        self.0 += rhs.0;
    }
}

impl Sub for Nanos {
    type Output = Nanos;
    fn sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 - rhs.0)
    }
}

impl SubAssign for Nanos {
    fn sub_assign(&mut self, rhs: Nanos) {
        self.0 -= rhs.0;
    }
}

impl Neg for Nanos {
    type Output = Nanos;
    fn neg(self) -> Nanos {
        Nanos(-self.0)
    }
}

impl Mul<i64> for Nanos {
    type Output = Nanos;
    fn mul(self, rhs: i64) -> Nanos {
        Nanos(self.0 * rhs)
    }
}

impl Div<i64> for Nanos {
    type Output = Nanos;
    fn div(self, rhs: i64) -> Nanos {
        Nanos(self.0 / rhs)
    }
}
