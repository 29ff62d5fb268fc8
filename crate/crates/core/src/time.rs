//! Wall-clock timestamps without a timezone.
//!
//! MIMIC dates are shifted per patient, so only ordering and differences carry
//! meaning. Values are stored as whole seconds relative to 1970-01-01 00:00:00.

use std::fmt;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

pub const SECONDS_PER_HOUR: i64 = 3_600;
pub const SECONDS_PER_DAY: i64 = 86_400;

const FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const fn from_seconds(secs: i64) -> Self {
        Timestamp(secs)
    }

    pub const fn seconds(self) -> i64 {
        self.0
    }

    /// Parses `YYYY-MM-DD HH:MM:SS`; a bare `YYYY-MM-DD` is read as midnight.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, FORMAT) {
            return Some(Timestamp(dt.and_utc().timestamp()));
        }
        let date = NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()?;
        Some(Timestamp(date.and_hms_opt(0, 0, 0)?.and_utc().timestamp()))
    }

    pub fn from_ymd_hms(y: i32, mo: u32, d: u32, h: u32, mi: u32, s: u32) -> Option<Self> {
        let dt = NaiveDate::from_ymd_opt(y, mo, d)?.and_hms_opt(h, mi, s)?;
        Some(Timestamp(dt.and_utc().timestamp()))
    }

    fn naive(self) -> NaiveDateTime {
        DateTime::from_timestamp(self.0, 0)
            .expect("timestamp within chrono range")
            .naive_utc()
    }

    pub fn year(self) -> i32 {
        self.naive().year()
    }

    pub fn plus_seconds(self, secs: i64) -> Self {
        Timestamp(self.0 + secs)
    }

    pub fn plus_hours(self, hours: i64) -> Self {
        self.plus_seconds(hours * SECONDS_PER_HOUR)
    }

    /// `self - earlier` in seconds.
    pub fn seconds_since(self, earlier: Timestamp) -> i64 {
        self.0 - earlier.0
    }

    pub fn date_string(self) -> String {
        self.naive().format("%Y-%m-%d").to_string()
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.naive().format(FORMAT))
    }
}
