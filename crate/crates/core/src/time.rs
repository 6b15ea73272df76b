//! Exact simulated time.
//!
//! Time is a non-negative rational number so that deadline comparisons never
//! suffer from floating-point drift. The textual form is either an integer
//! (`"3"`), a fraction (`"7/2"`) or a finite decimal (`"3.5"`); rendering
//! always produces the reduced integer or fraction form.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};
use std::str::FromStr;

use num_rational::Rational64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Time(Rational64);

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid time literal {0:?}")]
pub struct ParseTimeError(pub String);

impl Time {
    pub const ZERO: Time = Time(Rational64::new_raw(0, 1));

    pub fn from_int(n: i64) -> Self {
        Time(Rational64::from_integer(n))
    }

    pub fn ratio(num: i64, den: i64) -> Self {
        Time(Rational64::new(num, den))
    }

    pub fn is_positive(&self) -> bool {
        self.0 > Rational64::from_integer(0)
    }

    pub fn is_negative(&self) -> bool {
        self.0 < Rational64::from_integer(0)
    }

    pub fn half(self) -> Self {
        Time(self.0 / 2)
    }

    /// Largest time of which both are integer multiples.
    pub fn gcd(self, other: Time) -> Time {
        let (a, b) = (
            self.numer().abs() * other.denom(),
            other.numer().abs() * self.denom(),
        );
        let (mut x, mut y) = (a, b);
        while y != 0 {
            (x, y) = (y, x % y);
        }
        Time::ratio(x, self.denom() * other.denom())
    }

    pub fn numer(&self) -> i64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> i64 {
        *self.0.denom()
    }
}

impl Add for Time {
    type Output = Time;
    fn add(self, rhs: Time) -> Time {
        Time(self.0 + rhs.0)
    }
}

impl AddAssign for Time {
    fn add_assign(&mut self, rhs: Time) {
        self.0 += rhs.0;
    }
}

impl Sub for Time {
    type Output = Time;
    fn sub(self, rhs: Time) -> Time {
        Time(self.0 - rhs.0)
    }
}

impl Mul<i64> for Time {
    type Output = Time;
    fn mul(self, rhs: i64) -> Time {
        Time(self.0 * rhs)
    }
}

impl fmt::Display for Time {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self.0.denom() == 1 {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl FromStr for Time {
    type Err = ParseTimeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseTimeError(s.to_string());
        let t = s.trim();
        if let Some((n, d)) = t.split_once('/') {
            let n: i64 = n.trim().parse().map_err(|_| err())?;
            let d: i64 = d.trim().parse().map_err(|_| err())?;
            if d == 0 {
                return Err(err());
            }
            return Ok(Time::ratio(n, d));
        }
        if let Some((int, frac)) = t.split_once('.') {
            if frac.is_empty() || frac.len() > 12 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(err());
            }
            let negative = int.starts_with('-');
            let whole: i64 = if int.is_empty() || int == "-" {
                0
            } else {
                int.parse().map_err(|_| err())?
            };
            let den = 10i64.pow(frac.len() as u32);
            let part: i64 = frac.parse().map_err(|_| err())?;
            let num = whole.abs() * den + part;
            return Ok(Time::ratio(if negative { -num } else { num }, den));
        }
        t.parse::<i64>().map(Time::from_int).map_err(|_| err())
    }
}

impl Serialize for Time {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Time {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Int(i64),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Int(n) => Ok(Time::from_int(n)),
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gcd_of_rationals() {
        assert_eq!(Time::from_int(4).gcd(Time::from_int(6)), Time::from_int(2));
        assert_eq!(Time::ratio(1, 2).gcd(Time::ratio(1, 3)), Time::ratio(1, 6));
        assert_eq!(Time::ZERO.gcd(Time::ratio(3, 4)), Time::ratio(3, 4));
        assert_eq!(Time::ZERO.gcd(Time::ZERO), Time::ZERO);
    }

    #[test]
    fn parses_all_literal_forms() {
        assert_eq!("3".parse::<Time>().unwrap(), Time::from_int(3));
        assert_eq!("7/2".parse::<Time>().unwrap(), Time::ratio(7, 2));
        assert_eq!("3.5".parse::<Time>().unwrap(), Time::ratio(7, 2));
        assert_eq!("0.25".parse::<Time>().unwrap(), Time::ratio(1, 4));
        assert_eq!("-1.5".parse::<Time>().unwrap(), Time::ratio(-3, 2));
        assert!("1/0".parse::<Time>().is_err());
        assert!("abc".parse::<Time>().is_err());
        assert!("1.".parse::<Time>().is_err());
    }

    #[test]
    fn renders_reduced() {
        assert_eq!(Time::ratio(4, 2).to_string(), "2");
        assert_eq!(Time::ratio(2, 4).to_string(), "1/2");
        assert_eq!(Time::from_int(1).half().to_string(), "1/2");
    }

    #[test]
    fn json_round_trip() {
        let t = Time::ratio(5, 3);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, "\"5/3\"");
        assert_eq!(serde_json::from_str::<Time>(&s).unwrap(), t);
        assert_eq!(
            serde_json::from_str::<Time>("4").unwrap(),
            Time::from_int(4)
        );
    }
}
