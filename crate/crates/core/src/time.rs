//! The 15-minute window axis and its mapping onto the local calendar.

use std::fmt;
use std::str::FromStr;

use chrono::{
    DateTime, Datelike, Duration, NaiveDate, NaiveDateTime, Offset, TimeZone, Timelike, Utc,
};
use chrono_tz::Tz;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::config::CityConfig;
use crate::error::Error;

pub const WINDOW_SECS: i64 = 900;
pub const SLOTS_PER_DAY: usize = 96;
pub const BINS_PER_WEEK: usize = 7 * SLOTS_PER_DAY;

/// True if `ts` starts a 15-minute window (minute in {0,15,30,45}, zero seconds).
pub fn is_window_aligned(ts: DateTime<Utc>) -> bool {
    ts.timestamp_subsec_nanos() == 0 && ts.second() == 0 && ts.minute() % 15 == 0
}

/// ISO-8601 UTC rendering used in every file format: `2013-04-01T00:15:00Z`.
pub fn format_utc(ts: DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Uniform axis of 15-minute windows starting at a UTC instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowAxis {
    pub start: DateTime<Utc>,
    pub len: usize,
}

impl WindowAxis {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Self {
        let len = ((end - start).num_seconds().max(0) / WINDOW_SECS) as usize;
        WindowAxis { start, len }
    }

    pub fn for_city(config: &CityConfig) -> Self {
        Self::new(config.period_start_utc(), config.period_end_utc())
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.time_at(self.len)
    }

    /// Index of the window starting exactly at `ts`, if aligned and in range.
    pub fn index_of(&self, ts: DateTime<Utc>) -> Option<usize> {
        let secs = (ts - self.start).num_seconds();
        if secs < 0 || secs % WINDOW_SECS != 0 || ts.timestamp_subsec_nanos() != 0 {
            return None;
        }
        let idx = (secs / WINDOW_SECS) as usize;
        (idx < self.len).then_some(idx)
    }

    pub fn time_at(&self, idx: usize) -> DateTime<Utc> {
        self.start + Duration::seconds(idx as i64 * WINDOW_SECS)
    }

    /// Window index range covering the half-open UTC interval `[from, to)`,
    /// clipped to the axis.
    pub fn range(&self, from: DateTime<Utc>, to: DateTime<Utc>) -> std::ops::Range<usize> {
        let clip = |t: DateTime<Utc>| {
            let secs = (t - self.start).num_seconds();
            if secs <= 0 {
                0
            } else {
                (((secs + WINDOW_SECS - 1) / WINDOW_SECS) as usize).min(self.len)
            }
        };
        let a = clip(from);
        let b = clip(to).max(a);
        a..b
    }
}

/// ISO week identifier, written `2013-W52`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WeekId {
    pub year: i32,
    pub week: u32,
}

impl WeekId {
    pub fn of(date: NaiveDate) -> Self {
        let iso = date.iso_week();
        WeekId {
            year: iso.year(),
            week: iso.week(),
        }
    }

    pub fn monday(&self) -> Option<NaiveDate> {
        NaiveDate::from_isoywd_opt(self.year, self.week, chrono::Weekday::Mon)
    }
}

impl fmt::Display for WeekId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-W{:02}", self.year, self.week)
    }
}

impl FromStr for WeekId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || Error::InvalidWeekId(s.to_string());
        let (y, w) = s.trim().split_once("-W").ok_or_else(bad)?;
        let id = WeekId {
            year: y.parse().map_err(|_| bad())?,
            week: w.parse().map_err(|_| bad())?,
        };
        id.monday().ok_or_else(bad)?;
        Ok(id)
    }
}

impl Serialize for WeekId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WeekId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Local-time facts about one window.
#[derive(Debug, Clone, Copy)]
pub struct LocalWindow {
    pub local: NaiveDateTime,
    /// Local minus UTC, in seconds.
    pub offset_secs: i32,
    /// Typical-week bin, or `None` when the local wall-clock slot is
    /// anomalous (repeated at a DST fall-back, or not slot-aligned).
    pub bin: Option<u16>,
    pub week: WeekId,
}

impl LocalWindow {
    pub fn local_date(&self) -> NaiveDate {
        self.local.date()
    }
}

/// Local-calendar lookup table for every window of a city's axis.
#[derive(Debug, Clone)]
pub struct LocalCalendar {
    pub axis: WindowAxis,
    pub timezone: Tz,
    windows: Vec<LocalWindow>,
}

/// Week bin of a local wall-clock time: `day_of_week * 96 + slot`, Monday = 0.
pub fn week_bin(local: NaiveDateTime) -> Option<u16> {
    if local.minute() % 15 != 0 || local.second() != 0 {
        return None;
    }
    let day = local.weekday().num_days_from_monday() as usize;
    let slot = local.hour() as usize * 4 + local.minute() as usize / 15;
    Some((day * SLOTS_PER_DAY + slot) as u16)
}

impl LocalCalendar {
    pub fn new(axis: WindowAxis, timezone: Tz) -> Self {
        let windows = (0..axis.len)
            .map(|i| {
                let local_dt = axis.time_at(i).with_timezone(&timezone);
                let local = local_dt.naive_local();
                let ambiguous = !matches!(
                    timezone.offset_from_local_datetime(&local),
                    chrono::LocalResult::Single(_)
                );
                LocalWindow {
                    local,
                    offset_secs: local_dt.offset().fix().local_minus_utc(),
                    bin: if ambiguous { None } else { week_bin(local) },
                    week: WeekId::of(local.date()),
                }
            })
            .collect();
        LocalCalendar {
            axis,
            timezone,
            windows,
        }
    }

    pub fn for_city(config: &CityConfig) -> Self {
        Self::new(WindowAxis::for_city(config), config.timezone)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window(&self, idx: usize) -> &LocalWindow {
        &self.windows[idx]
    }

    pub fn windows(&self) -> &[LocalWindow] {
        &self.windows
    }

    /// Distinct local ISO weeks touched by the axis, in order.
    pub fn weeks(&self) -> Vec<WeekId> {
        let mut out: Vec<WeekId> = Vec::new();
        for w in &self.windows {
            if out.last() != Some(&w.week) {
                out.push(w.week);
            }
        }
        out
    }
}
