//! Hour-resolution timestamps.
//!
//! All instants are handled as naive UTC datetimes. Inputs carrying an explicit
//! offset are converted to UTC on parse; naive inputs are taken as already UTC.

use chrono::{DateTime, NaiveDateTime, Timelike};

const NAIVE_FORMATS: &[&str] = &[
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
];

/// Parses an ISO-8601 timestamp, with or without offset.
pub fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.naive_utc());
    }
    if let Some(stripped) = raw.strip_suffix('Z') {
        if let Some(dt) = parse_naive(stripped) {
            return Some(dt);
        }
    }
    parse_naive(raw).or_else(|| {
        // "2024-01-01T05" style, hour only
        NaiveDateTime::parse_from_str(&format!("{raw}:00"), "%Y-%m-%dT%H:%M").ok()
    })
}

fn parse_naive(raw: &str) -> Option<NaiveDateTime> {
    NAIVE_FORMATS
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
}

pub fn is_on_hour(ts: &NaiveDateTime) -> bool {
    ts.minute() == 0 && ts.second() == 0 && ts.nanosecond() == 0
}

/// Whole hours since the Unix epoch. Callers are expected to pass hour-truncated instants.
pub fn hour_index(ts: &NaiveDateTime) -> i64 {
    ts.and_utc().timestamp().div_euclid(3600)
}

pub fn from_hour_index(index: i64) -> NaiveDateTime {
    DateTime::from_timestamp(index * 3600, 0)
        .expect("hour index within chrono range")
        .naive_utc()
}

pub fn format_hour(ts: &NaiveDateTime) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}
