//! Long-term series at coarser resolutions, typical-week profiles,
//! L1 normalization and residuals against the typical week.
//!
//! Everything here is computed in city-local time and honours the presence
//! mask: values at absent windows never enter any statistic.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::activity::ActivityType;
use crate::error::Error;
use crate::spatial::RegionSeries;
use crate::time::{LocalCalendar, WeekId, BINS_PER_WEEK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Resolution {
    #[serde(rename = "15min")]
    Min15,
    #[serde(rename = "hour")]
    Hour,
    #[serde(rename = "day")]
    Day,
    #[serde(rename = "week")]
    Week,
}

impl Resolution {
    pub const ALL: [Resolution; 4] = [
        Resolution::Min15,
        Resolution::Hour,
        Resolution::Day,
        Resolution::Week,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Resolution::Min15 => "15min",
            Resolution::Hour => "hour",
            Resolution::Day => "day",
            Resolution::Week => "week",
        }
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Resolution::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::UnknownResolution(s.to_string()))
    }
}

/// One output bin of [`resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ResampledBin {
    pub start: DateTime<Utc>,
    /// Number of 15-minute windows in the bin.
    pub windows: u32,
    /// Number of those windows with the presence bit set.
    pub present: u32,
    /// Sum over the bin, `None` when no window was present.
    pub value: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKey {
    Window(usize),
    Hour(NaiveDateTime, i32),
    Day(chrono::NaiveDate),
    Week(WeekId),
}

fn bin_key(cal: &LocalCalendar, i: usize, res: Resolution) -> BinKey {
    let w = cal.window(i);
    match res {
        Resolution::Min15 => BinKey::Window(i),
        // The offset keeps the two copies of a repeated fall-back hour apart.
        Resolution::Hour => BinKey::Hour(
            w.local.with_minute(0).unwrap().with_second(0).unwrap(),
            w.offset_secs,
        ),
        Resolution::Day => BinKey::Day(w.local_date()),
        Resolution::Week => BinKey::Week(w.week),
    }
}

/// Sums a series into hour, local-day or local-week bins. Local days around
/// DST changes hold 92 or 100 windows.
pub fn resample(
    series: &RegionSeries,
    activity: ActivityType,
    resolution: Resolution,
    calendar: &LocalCalendar,
) -> Vec<ResampledBin> {
    let values = series.values(activity);
    let mut out: Vec<ResampledBin> = Vec::new();
    let mut current: Option<BinKey> = None;
    for i in 0..series.len().min(calendar.len()) {
        let key = bin_key(calendar, i, resolution);
        if current != Some(key) {
            current = Some(key);
            out.push(ResampledBin {
                start: calendar.axis.time_at(i),
                windows: 0,
                present: 0,
                value: None,
            });
        }
        let bin = out.last_mut().unwrap();
        bin.windows += 1;
        if series.presence[i] {
            bin.present += 1;
            bin.value = Some(bin.value.unwrap_or(0) + values[i]);
        }
    }
    out
}

/// A 672-bin typical week (Monday 00:00 local first), raw or L1-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyProfile {
    pub region_id: String,
    pub activity: ActivityType,
    pub normalized: bool,
    pub values: Vec<f64>,
    pub support: Vec<u32>,
}

impl WeeklyProfile {
    /// Empty means no information: no supporting sample at all, or (for a
    /// normalized profile) nothing to normalize.
    pub fn is_empty(&self) -> bool {
        if self.normalized {
            self.values.iter().all(|v| *v == 0.0)
        } else {
            self.support.iter().all(|s| *s == 0)
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Mean of every present, non-excluded occurrence of each local week bin.
/// Windows on anomalous DST wall-clock slots are left out.
pub fn typical_week(
    series: &RegionSeries,
    activity: ActivityType,
    calendar: &LocalCalendar,
    exclude_weeks: &BTreeSet<WeekId>,
) -> WeeklyProfile {
    let values = series.values(activity);
    let mut sums = vec![0u128; BINS_PER_WEEK];
    let mut support = vec![0u32; BINS_PER_WEEK];
    for (i, w) in calendar.windows().iter().enumerate().take(series.len()) {
        let Some(b) = w.bin else { continue };
        if !series.presence[i] || exclude_weeks.contains(&w.week) {
            continue;
        }
        sums[b as usize] += values[i] as u128;
        support[b as usize] += 1;
    }
    let values = sums
        .iter()
        .zip(&support)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { s as f64 / n as f64 })
        .collect();
    WeeklyProfile {
        region_id: series.region_id.clone(),
        activity,
        normalized: false,
        values,
        support,
    }
}

/// Scales a profile so its bins sum to 1. A profile summing to zero comes
/// back normalized and empty, with no division performed.
pub fn normalize(profile: &WeeklyProfile) -> WeeklyProfile {
    let total = profile.sum();
    let values = if total > 0.0 {
        profile.values.iter().map(|v| v / total).collect()
    } else {
        vec![0.0; profile.values.len()]
    };
    WeeklyProfile {
        values,
        normalized: true,
        ..profile.clone()
    }
}

/// Observed minus typical-week expectation, with per-bin spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSeries {
    pub region_id: String,
    pub activity: ActivityType,
    /// UTC start of window 0.
    pub start: DateTime<Utc>,
    pub step_minutes: u32,
    /// One entry per window; `None` where the window is absent, on an
    /// anomalous DST slot, or its bin has no support.
    pub values: Vec<Option<f64>>,
    /// Per-bin sample standard deviation (n - 1), `None` with fewer than
    /// two samples.
    pub sigma: Vec<Option<f64>>,
}

impl ResidualSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn residuals(
    series: &RegionSeries,
    activity: ActivityType,
    profile: &WeeklyProfile,
    calendar: &LocalCalendar,
) -> ResidualSeries {
    let obs = series.values(activity);
    let mut values = vec![None; series.len()];
    let mut sq = vec![0.0f64; BINS_PER_WEEK];
    let mut n = vec![0u32; BINS_PER_WEEK];
    for (i, w) in calendar.windows().iter().enumerate().take(series.len()) {
        let Some(b) = w.bin else { continue };
        let b = b as usize;
        if !series.presence[i] || profile.support[b] == 0 {
            continue;
        }
        let r = obs[i] as f64 - profile.values[b];
        values[i] = Some(r);
        sq[b] += r * r;
        n[b] += 1;
    }
    let sigma = (0..BINS_PER_WEEK)
        .map(|b| {
            (profile.support[b] >= 2 && n[b] >= 2).then(|| (sq[b] / (n[b] - 1) as f64).sqrt())
        })
        .collect();
    ResidualSeries {
        region_id: series.region_id.clone(),
        activity,
        start: calendar.axis.start,
        step_minutes: 15,
        values,
        sigma,
    }
}
