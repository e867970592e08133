//! Per-cell volume and activity-mix maps over a time period.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::activity::ActivityType;
use crate::error::{Error, Result};
use crate::spatial::{CellIndex, Grid, RegionSeries};
use crate::time::WindowAxis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Mean volume per present window.
    Volume,
    /// Share of one type in the naive sum of all five types.
    Ratio,
    /// `A / (A + B)` for two types.
    PairRatio,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Volume => "volume",
            Metric::Ratio => "ratio",
            Metric::PairRatio => "pair_ratio",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Metric::Volume, Metric::Ratio, Metric::PairRatio]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown density metric `{s}`")))
    }
}

/// Half-open UTC interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl Period {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Self {
        Period { start, end }
    }

    pub fn of_axis(axis: &WindowAxis) -> Self {
        Period::new(axis.start, axis.end())
    }

    fn windows(&self, axis: &WindowAxis) -> Result<std::ops::Range<usize>> {
        if self.start < axis.start || self.end > axis.end() {
            return Err(Error::PeriodOutOfRange {
                start: self.start,
                end: self.end,
            });
        }
        let r = axis.range(self.start, self.end);
        if r.is_empty() {
            return Err(Error::EmptyPeriod);
        }
        Ok(r)
    }
}

/// Row-major grid of per-cell values. Cells without data are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    pub metric: Metric,
    #[serde(rename = "type")]
    pub activity: ActivityType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub other: Option<ActivityType>,
    pub period: Period,
    pub n_rows: u32,
    pub n_cols: u32,
    pub values: Vec<Option<f64>>,
    pub coverage: Vec<u32>,
}

impl DensityMap {
    pub fn get(&self, cell: CellIndex) -> Option<f64> {
        self.values[(cell.row * self.n_cols + cell.col) as usize]
    }
}

/// Per-type sums over the present windows of a range, plus the number of
/// present windows.
fn totals(series: &RegionSeries, range: std::ops::Range<usize>) -> ([u128; ActivityType::COUNT], u32) {
    let mut sums = [0u128; ActivityType::COUNT];
    let mut present = 0;
    for w in range {
        if !series.presence[w] {
            continue;
        }
        present += 1;
        for (k, s) in sums.iter_mut().enumerate() {
            *s += series.activity[k][w] as u128;
        }
    }
    (sums, present)
}

fn build(
    cells: &BTreeMap<CellIndex, RegionSeries>,
    grid: &Grid,
    axis: &WindowAxis,
    period: Period,
    metric: Metric,
    activity: ActivityType,
    other: Option<ActivityType>,
    value: impl Fn(&[u128; ActivityType::COUNT], u32) -> Option<f64>,
) -> Result<DensityMap> {
    let range = period.windows(axis)?;
    let mut values = vec![None; grid.n_cells()];
    let mut coverage = vec![0; grid.n_cells()];
    for (cell, series) in cells {
        let (sums, present) = totals(series, range.clone());
        let i = grid.flat_index(*cell);
        coverage[i] = present;
        if present > 0 {
            values[i] = value(&sums, present);
        }
    }
    Ok(DensityMap {
        metric,
        activity,
        other,
        period,
        n_rows: grid.n_rows,
        n_cols: grid.n_cols,
        values,
        coverage,
    })
}

pub fn volume_map(
    cells: &BTreeMap<CellIndex, RegionSeries>,
    grid: &Grid,
    axis: &WindowAxis,
    activity: ActivityType,
    period: Period,
) -> Result<DensityMap> {
    let k = activity.ordinal();
    build(cells, grid, axis, period, Metric::Volume, activity, None, |s, n| {
        Some(s[k] as f64 / n as f64)
    })
}

/// Share of `activity` in the unit-naive total of all five types.
pub fn ratio_map(
    cells: &BTreeMap<CellIndex, RegionSeries>,
    grid: &Grid,
    axis: &WindowAxis,
    activity: ActivityType,
    period: Period,
) -> Result<DensityMap> {
    let k = activity.ordinal();
    build(cells, grid, axis, period, Metric::Ratio, activity, None, |s, _| {
        let total: u128 = s.iter().sum();
        (total > 0).then(|| s[k] as f64 / total as f64)
    })
}

pub fn pair_ratio_map(
    cells: &BTreeMap<CellIndex, RegionSeries>,
    grid: &Grid,
    axis: &WindowAxis,
    activity: ActivityType,
    other: ActivityType,
    period: Period,
) -> Result<DensityMap> {
    if activity == other {
        return Err(Error::InvalidParameter("pair ratio needs two distinct types".into()));
    }
    let (a, b) = (activity.ordinal(), other.ordinal());
    build(cells, grid, axis, period, Metric::PairRatio, activity, Some(other), |s, _| {
        let total = s[a] + s[b];
        (total > 0).then(|| s[a] as f64 / total as f64)
    })
}
