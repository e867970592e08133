//! Special-event detection as runs of large standardized residuals.

use std::io::{self, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::activity::ActivityType;
use crate::error::{Error, Result};
use crate::profiles::ResidualSeries;
use crate::time::LocalCalendar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub threshold_z: f64,
    /// Minimum span of a merged run, in windows.
    pub min_duration: usize,
    /// Runs separated by at most this many sub-threshold windows merge.
    pub merge_gap: usize,
    /// Also report drops (z <= -threshold).
    pub negative: bool,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            threshold_z: 4.0,
            min_duration: 2,
            merge_gap: 2,
            negative: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventReport {
    pub region_id: String,
    pub activity: ActivityType,
    pub direction: Direction,
    /// First window of the event.
    pub start_window: DateTime<Utc>,
    /// Last window of the event (inclusive).
    pub end_window: DateTime<Utc>,
    pub peak_window: DateTime<Utc>,
    pub peak_z: f64,
    pub mean_z: f64,
    pub duration_windows: usize,
    /// Window indices on the city axis, inclusive.
    pub start_index: usize,
    pub end_index: usize,
}

/// Standardized residual per window; `None` where the residual or its bin's
/// sigma is undefined (or sigma is zero).
pub fn z_scores(res: &ResidualSeries, calendar: &LocalCalendar) -> Vec<Option<f64>> {
    res.values
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let r = (*r)?;
            let b = calendar.window(i).bin?;
            let s = res.sigma[b as usize]?;
            (s > 0.0).then(|| r / s)
        })
        .collect()
}

/// Maximal trigger runs merged across short gaps, as inclusive index pairs.
fn merged_runs(trigger: impl Iterator<Item = bool>, merge_gap: usize) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (i, on) in trigger.enumerate() {
        if !on {
            continue;
        }
        match runs.last_mut() {
            Some((_, end)) if i - *end - 1 <= merge_gap => *end = i,
            _ => runs.push((i, i)),
        }
    }
    runs
}

pub fn detect(
    res: &ResidualSeries,
    calendar: &LocalCalendar,
    params: &DetectParams,
) -> Result<Vec<EventReport>> {
    if !(params.threshold_z.is_finite() && params.threshold_z > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold_z must be positive, got {}",
            params.threshold_z
        )));
    }
    let z = z_scores(res, calendar);
    let mut events = Vec::new();
    let mut directions = vec![Direction::Positive];
    if params.negative {
        directions.push(Direction::Negative);
    }
    for dir in directions {
        let sign = match dir {
            Direction::Positive => 1.0,
            Direction::Negative => -1.0,
        };
        let trig = z.iter().map(|v| v.is_some_and(|v| sign * v >= params.threshold_z));
        for (start, end) in merged_runs(trig, params.merge_gap) {
            let duration = end - start + 1;
            if duration < params.min_duration.max(1) {
                continue;
            }
            let span: Vec<(usize, f64)> =
                (start..=end).filter_map(|i| z[i].map(|v| (i, v))).collect();
            let (peak, peak_z) = span
                .iter()
                .copied()
                .reduce(|a, b| if sign * b.1 > sign * a.1 { b } else { a })
                .expect("a run holds at least one triggering window");
            let mean_z = span.iter().map(|(_, v)| v).sum::<f64>() / span.len() as f64;
            events.push(EventReport {
                region_id: res.region_id.clone(),
                activity: res.activity,
                direction: dir,
                start_window: calendar.axis.time_at(start),
                end_window: calendar.axis.time_at(end),
                peak_window: calendar.axis.time_at(peak),
                peak_z,
                mean_z,
                duration_windows: duration,
                start_index: start,
                end_index: end,
            });
        }
    }
    events.sort_by_key(|e| e.start_index);
    Ok(events)
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(w: &mut W, events: &[EventReport]) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut *w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
