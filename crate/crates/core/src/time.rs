//! Instants and spans used throughout the engine.
//!
//! Both are millisecond counts. Instants serialize as RFC 3339 UTC strings,
//! spans as compact strings such as `"2d"`, `"5h30m"` or `"1500ms"`.

use alloc::format;
use alloc::string::{String, ToString};
use core::fmt;
use core::ops::{Add, Sub};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

const SECOND: i64 = 1_000;
const MINUTE: i64 = 60 * SECOND;
const HOUR: i64 = 60 * MINUTE;
const DAY: i64 = 24 * HOUR;

/// A point in time, in milliseconds since the Unix epoch (UTC).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const EPOCH: Timestamp = Timestamp(0);

    pub const fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub const fn as_millis(self) -> i64 {
        self.0
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        DateTime::parse_from_rfc3339(s)
            .map(|dt| Timestamp(dt.with_timezone(&Utc).timestamp_millis()))
            .map_err(|e| format!("invalid RFC 3339 timestamp {s:?}: {e}"))
    }

    pub fn to_rfc3339(self) -> String {
        match DateTime::<Utc>::from_timestamp_millis(self.0) {
            Some(dt) => dt.to_rfc3339_opts(SecondsFormat::Millis, true),
            None => self.0.to_string(),
        }
    }

    pub fn since(self, earlier: Timestamp) -> Span {
        Span(self.0.saturating_sub(earlier.0))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_rfc3339())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Timestamp::parse(&s).map_err(de::Error::custom)
    }
}

impl Add<Span> for Timestamp {
    type Output = Timestamp;
    fn add(self, rhs: Span) -> Timestamp {
        Timestamp(self.0.saturating_add(rhs.0))
    }
}

impl Sub<Span> for Timestamp {
    type Output = Timestamp;
    fn sub(self, rhs: Span) -> Timestamp {
        Timestamp(self.0.saturating_sub(rhs.0))
    }
}

/// A signed length of time in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Span(i64);

impl Span {
    pub const ZERO: Span = Span(0);

    pub const fn from_millis(ms: i64) -> Self {
        Span(ms)
    }
    pub const fn seconds(n: i64) -> Self {
        Span(n * SECOND)
    }
    pub const fn minutes(n: i64) -> Self {
        Span(n * MINUTE)
    }
    pub const fn hours(n: i64) -> Self {
        Span(n * HOUR)
    }
    pub const fn days(n: i64) -> Self {
        Span(n * DAY)
    }
    pub const fn as_millis(self) -> i64 {
        self.0
    }

    /// Parses `"2d"`, `"5h"`, `"30m"`, `"10s"`, `"250ms"` and concatenations
    /// such as `"1d12h"`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.is_empty() {
            return Err("empty duration".to_string());
        }
        let bytes = s.as_bytes();
        let mut total: i64 = 0;
        let mut i = 0;
        while i < bytes.len() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if start == i {
                return Err(format!("invalid duration {s:?}: expected digits"));
            }
            let n: i64 = s[start..i]
                .parse()
                .map_err(|_| format!("invalid duration {s:?}"))?;
            let unit_start = i;
            while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
                i += 1;
            }
            let unit = match &s[unit_start..i] {
                "d" => DAY,
                "h" => HOUR,
                "m" => MINUTE,
                "s" => SECOND,
                "ms" => 1,
                other => return Err(format!("invalid duration unit {other:?} in {s:?}")),
            };
            total = n
                .checked_mul(unit)
                .and_then(|v| total.checked_add(v))
                .ok_or_else(|| format!("duration {s:?} overflows"))?;
        }
        Ok(Span(total))
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut ms = self.0;
        if ms == 0 {
            return f.write_str("0s");
        }
        if ms < 0 {
            f.write_str("-")?;
            ms = -ms;
        }
        for (unit, label) in [(DAY, "d"), (HOUR, "h"), (MINUTE, "m"), (SECOND, "s"), (1, "ms")] {
            if ms >= unit {
                write!(f, "{}{}", ms / unit, label)?;
                ms %= unit;
            }
        }
        Ok(())
    }
}

impl Serialize for Span {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Span {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let neg = s.starts_with('-');
        let span = Span::parse(s.trim_start_matches('-')).map_err(de::Error::custom)?;
        Ok(if neg { Span(-span.0) } else { span })
    }
}

impl Add for Span {
    type Output = Span;
    fn add(self, rhs: Span) -> Span {
        Span(self.0.saturating_add(rhs.0))
    }
}

impl Sub for Span {
    type Output = Span;
    fn sub(self, rhs: Span) -> Span {
        Span(self.0.saturating_sub(rhs.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_compound_spans() {
        assert_eq!(Span::parse("2d").unwrap(), Span::days(2));
        assert_eq!(Span::parse("1d12h").unwrap(), Span::hours(36));
        assert_eq!(Span::parse("30m").unwrap(), Span::minutes(30));
        assert_eq!(Span::parse("250ms").unwrap(), Span::from_millis(250));
        assert!(Span::parse("3w").is_err());
        assert!(Span::parse("").is_err());
        assert!(Span::parse("d").is_err());
    }

    #[test]
    fn span_display_round_trips() {
        for ms in [0, 1, 999, 61_000, DAY + 5 * HOUR + 7, 9 * DAY] {
            let s = Span::from_millis(ms);
            assert_eq!(Span::parse(&s.to_string()).unwrap(), s);
        }
    }

    #[test]
    fn timestamps_are_rfc3339_utc() {
        let t = Timestamp::from_millis(1_600_000_000_123);
        assert_eq!(t.to_rfc3339(), "2020-09-13T12:26:40.123Z");
        assert_eq!(Timestamp::parse("2020-09-13T14:26:40.123+02:00").unwrap(), t);
        assert_eq!((t + Span::days(2)).since(t), Span::days(2));
    }
}
