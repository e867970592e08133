//! Synthetic cities with planted land-use archetypes, trend, holidays and
//! events.
//!
//! Each grid cell is zoned with an archetype drawn from the mix and every
//! antenna inherits the archetype of the cell it lands in. The expected count
//! of antenna `a`, window `w`, type `t` is
//!
//! ```text
//! scale_a * base_t * template[arch(a)][t][bin(w)] * growth^week(w) * holiday(week(w)) * event(w, a, t)
//! ```
//!
//! with templates rescaled to mean 1, so `base_t` is the mean count per
//! window of a unit-scale antenna. One mean-preserving log-normal factor per
//! (antenna, window) multiplies all five rates, then each count is Poisson.
//!
//! Randomness: placement and zoning use stream 0 of a ChaCha8 generator
//! seeded from `seed`; antenna `i` uses stream `i + 1`, so antennas can be
//! generated in parallel and output order is fixed by antenna then time.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activity::{ActivityType, PerType};
use crate::config::{BBox, CityConfig};
use crate::error::{Error, Result};
use crate::ingest::{write_activity_header, write_antennas, Antenna};
use crate::spatial::{assign_antennas, build_grid, Aggregation, Aggregator, AssignmentTable, CellIndex, Grid};
use crate::time::{format_utc, is_window_aligned, week_bin, LocalCalendar, WeekId, BINS_PER_WEEK, SLOTS_PER_DAY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Business,
    Residential,
    Leisure,
    Uniform,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::Business,
        Archetype::Residential,
        Archetype::Leisure,
        Archetype::Uniform,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeMix {
    pub business: f64,
    pub residential: f64,
    pub leisure: f64,
    pub uniform: f64,
}

impl ArchetypeMix {
    fn weights(&self) -> [f64; 4] {
        [self.business, self.residential, self.leisure, self.uniform]
    }
}

impl Default for ArchetypeMix {
    fn default() -> Self {
        ArchetypeMix {
            business: 0.25,
            residential: 0.45,
            leisure: 0.15,
            uniform: 0.15,
        }
    }
}

/// Log-normal parameters (of the log) for per-antenna volume scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeScale {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for VolumeScale {
    fn default() -> Self {
        VolumeScale { mu: 0.0, sigma: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Holiday {
    pub week: WeekId,
    /// Multiplier applied to every window of the local week.
    pub damping: f64,
}

/// Where a planted event happens: a cell id such as `"5:5"` or a
/// `[lat, lon]` point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventSite {
    Cell(String),
    Point([f64; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub site: EventSite,
    pub start: DateTime<Utc>,
    pub duration_windows: usize,
    pub amplitude: f64,
    #[serde(default = "all_types")]
    pub types: Vec<ActivityType>,
}

fn all_types() -> Vec<ActivityType> {
    ActivityType::ALL.to_vec()
}

fn default_antennas() -> usize {
    2000
}

fn default_base_volume() -> PerType<f64> {
    [4.0, 2.0, 2.0e6, 4.0e5, 60.0]
}

fn default_growth() -> f64 {
    1.01
}

fn default_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub city: CityConfig,
    #[serde(default = "default_antennas")]
    pub n_antennas: usize,
    #[serde(default)]
    pub mix: ArchetypeMix,
    /// Replacement 672-bin shapes; anything not listed uses the builtin.
    #[serde(default)]
    pub templates: BTreeMap<Archetype, BTreeMap<ActivityType, Vec<f64>>>,
    #[serde(default)]
    pub scale: VolumeScale,
    /// Mean count per window of a unit-scale antenna, per type.
    #[serde(default = "default_base_volume")]
    pub base_volume: PerType<f64>,
    /// Multiplicative growth per week.
    #[serde(default = "default_growth")]
    pub weekly_growth: f64,
    /// Sigma of the log of the per-window noise factor.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub holidays: Vec<Holiday>,
    #[serde(default)]
    pub events: Vec<PlantedEvent>,
    /// Probability that an antenna-window is dropped from the output.
    #[serde(default)]
    pub missing_rate: f64,
}

impl ScenarioSpec {
    /// The reference scenario: 40 weeks of a 10 x 10 cell city with 2,000
    /// antennas, a Christmas holiday and one stadium event.
    pub fn default_city() -> Self {
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).unwrap();
        ScenarioSpec {
            seed: 20130401,
            city: CityConfig {
                city_id: "synthcity".into(),
                bbox: BBox::new(51.50, -0.20, 51.545, -0.128),
                cell_size_m: 500.0,
                period_start: d(2013, 4, 1),
                period_end: d(2014, 1, 6),
                timezone: chrono_tz::Europe::London,
            },
            n_antennas: default_antennas(),
            mix: ArchetypeMix::default(),
            templates: BTreeMap::new(),
            scale: VolumeScale::default(),
            base_volume: default_base_volume(),
            weekly_growth: default_growth(),
            noise_sigma: default_noise(),
            holidays: vec![Holiday {
                week: WeekId { year: 2013, week: 52 },
                damping: 0.6,
            }],
            events: vec![PlantedEvent {
                site: EventSite::Cell("5:5".into()),
                start: Utc.with_ymd_and_hms(2013, 5, 25, 18, 0, 0).unwrap(),
                duration_windows: 12,
                amplitude: 10.0,
                types: all_types(),
            }],
            missing_rate: 0.0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Uses one shape for every activity type of an archetype.
    pub fn set_template(&mut self, archetype: Archetype, shape: Vec<f64>) {
        let per_type = ActivityType::ALL.iter().map(|t| (*t, shape.clone())).collect();
        self.templates.insert(archetype, per_type);
    }
}

/// Per archetype (in [`Archetype::ALL`] order) and type, a 672-bin shape.
pub type Templates = [PerType<Vec<f64>>; 4];

fn day_bump(hour: f64, centre: f64, sigma: f64) -> f64 {
    let d = (hour - centre).rem_euclid(24.0);
    let d = d.min(24.0 - d);
    (-0.5 * (d / sigma).powi(2)).exp()
}

fn week_shape(f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..BINS_PER_WEEK)
        .map(|b| f(b / SLOTS_PER_DAY, (b % SLOTS_PER_DAY) as f64 / 4.0))
        .collect();
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    raw.into_iter().map(|v| v.max(0.05 * peak)).collect()
}

pub const RESIDENTIAL_PLATEAU: f64 = 0.2;

/// Builtin archetype shapes (peak 1, same shape for all five types):
///
/// * business: weekday Gaussian at 13:00 (sigma 2.5 h), weekends at 0.25
/// * residential: weekday Gaussian at 20:00 (sigma 2 h), weekend plateau of
///   [`RESIDENTIAL_PLATEAU`] from 09:00 to 21:00
/// * leisure: weekend Gaussian at 14:00 (sigma 3 h), weekdays at 0.3
/// * uniform: constant
///
/// Every shape is floored at 5% of its peak.
pub fn builtin_templates() -> Templates {
    let weekend = |d: usize| d >= 5;
    let business = week_shape(|d, h| day_bump(h, 13.0, 2.5) * if weekend(d) { 0.25 } else { 1.0 });
    let residential = week_shape(|d, h| {
        if !weekend(d) {
            day_bump(h, 20.0, 2.0)
        } else if (9.0..21.0).contains(&h) {
            RESIDENTIAL_PLATEAU
        } else {
            0.0
        }
    });
    let leisure = week_shape(|d, h| day_bump(h, 14.0, 3.0) * if weekend(d) { 1.0 } else { 0.3 });
    let uniform = vec![1.0; BINS_PER_WEEK];
    [business, residential, leisure, uniform].map(|s| std::array::from_fn(|_| s.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntennaTruth {
    pub antenna_id: String,
    pub archetype: Archetype,
    pub cell: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTruth {
    pub region_id: String,
    pub start_window: DateTime<Utc>,
    /// Last affected window (inclusive).
    pub end_window: DateTime<Utc>,
    pub start_index: usize,
    pub end_index: usize,
    pub amplitude: f64,
    pub types: Vec<ActivityType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub antennas: Vec<AntennaTruth>,
    /// Zoning of every grid cell.
    pub cells: BTreeMap<String, Archetype>,
    pub events: Vec<EventTruth>,
    pub holidays: Vec<Holiday>,
}

impl GroundTruth {
    pub fn holiday_weeks(&self) -> BTreeSet<WeekId> {
        self.holidays.iter().map(|h| h.week).collect()
    }
}

struct AntennaEvent {
    windows: std::ops::Range<usize>,
    amplitude: f64,
    types: [bool; ActivityType::COUNT],
}

/// A validated spec with antennas placed and per-window factors resolved.
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub grid: Grid,
    pub calendar: LocalCalendar,
    pub antennas: Vec<Antenna>,
    pub truth: GroundTruth,
    archetypes: Vec<Archetype>,
    scales: Vec<f64>,
    /// Template rescaled to mean 1, by archetype and type.
    rates: Templates,
    window_bin: Vec<u16>,
    window_factor: Vec<f64>,
    antenna_events: Vec<Vec<AntennaEvent>>,
}

fn check_shape(shape: &[f64], what: &str) -> Result<()> {
    if shape.len() != BINS_PER_WEEK {
        return Err(Error::InvalidScenario(format!("{what} template has {} bins", shape.len())));
    }
    if shape.iter().any(|v| !v.is_finite() || *v < 0.0) || shape.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidScenario(format!(
            "{what} template must be non-negative with a positive sum"
        )));
    }
    Ok(())
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

impl Scenario {
    pub fn new(spec: ScenarioSpec) -> Result<Self> {
        let spec_err = |m: String| Err(Error::InvalidScenario(m));
        if spec.n_antennas == 0 {
            return spec_err("scenario has zero antennas".into());
        }
        spec.city.validate()?;
        let w = spec.mix.weights();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return spec_err(format!("archetype mix {w:?} must be non-negative and sum to 1"));
        }
        if !(spec.weekly_growth > 0.0) || !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
            return spec_err("weekly_growth must be positive and noise_sigma non-negative".into());
        }
        if !(spec.scale.sigma >= 0.0) || !spec.scale.mu.is_finite() {
            return spec_err("invalid volume scale".into());
        }
        if spec.base_volume.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return spec_err("base volumes must be non-negative".into());
        }
        if !(0.0..1.0).contains(&spec.missing_rate) {
            return spec_err("missing_rate must be in [0, 1)".into());
        }
        if let Some(h) = spec.holidays.iter().find(|h| !(h.damping > 0.0)) {
            return spec_err(format!("holiday {} has non-positive damping", h.week));
        }

        let mut templates = builtin_templates();
        for (arch, per_type) in &spec.templates {
            let slot = &mut templates[*arch as usize];
            for (t, shape) in per_type {
                check_shape(shape, &format!("{arch:?}/{t}"))?;
                slot[t.ordinal()] = shape.clone();
            }
        }
        let rates = templates.map(|per_type| {
            per_type.map(|s| {
                let mean = s.iter().sum::<f64>() / s.len() as f64;
                s.iter().map(|v| v / mean).collect::<Vec<f64>>()
            })
        });

        let grid = build_grid(&spec.city)?;
        let calendar = LocalCalendar::for_city(&spec.city);
        let first_date = spec.city.period_start;

        let holiday: BTreeMap<WeekId, f64> = spec.holidays.iter().map(|h| (h.week, h.damping)).collect();
        let mut window_bin = Vec::with_capacity(calendar.len());
        let mut window_factor = Vec::with_capacity(calendar.len());
        for lw in calendar.windows() {
            window_bin.push(week_bin(lw.local).unwrap_or(0));
            let week_index = (lw.local_date() - first_date).num_days().div_euclid(7);
            let damp = holiday.get(&lw.week).copied().unwrap_or(1.0);
            window_factor.push(spec.weekly_growth.powi(week_index as i32) * damp);
        }

        // stream 0: zoning, then placement and per-antenna scale
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let cum: Vec<f64> = w.iter().scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        }).collect();
        let zoning: Vec<Archetype> = (0..grid.n_cells())
            .map(|_| {
                let u: f64 = rng.random();
                let i = cum.iter().position(|c| u < *c).unwrap_or_else(|| w.iter().rposition(|x| *x > 0.0).unwrap());
                Archetype::ALL[i]
            })
            .collect();
        let scale_dist = LogNormal::new(spec.scale.mu, spec.scale.sigma)
            .map_err(|e| Error::InvalidScenario(format!("volume scale: {e}")))?;
        let bb = spec.city.bbox;
        let width = (spec.n_antennas as f64).log10().floor() as usize + 1;
        let mut antennas = Vec::with_capacity(spec.n_antennas);
        let mut archetypes = Vec::with_capacity(spec.n_antennas);
        let mut cells = Vec::with_capacity(spec.n_antennas);
        let mut scales = Vec::with_capacity(spec.n_antennas);
        for i in 0..spec.n_antennas {
            let lat = round6(rng.random_range(bb.lat_min..bb.lat_max)).clamp(bb.lat_min, bb.lat_max);
            let lon = round6(rng.random_range(bb.lon_min..bb.lon_max)).clamp(bb.lon_min, bb.lon_max);
            let cell = grid.locate(lat, lon).expect("placed inside the bbox");
            archetypes.push(zoning[grid.flat_index(cell)]);
            cells.push(cell);
            scales.push(scale_dist.sample(&mut rng));
            antennas.push(Antenna {
                antenna_id: format!("A{:0width$}", i + 1),
                lat,
                lon,
            });
        }

        let mut antenna_events: Vec<Vec<AntennaEvent>> = (0..spec.n_antennas).map(|_| Vec::new()).collect();
        let mut event_truth = Vec::new();
        for ev in &spec.events {
            let cell = match &ev.site {
                EventSite::Cell(s) => {
                    let c: CellIndex = s
                        .parse()
                        .map_err(|_| Error::InvalidScenario(format!("bad event cell `{s}`")))?;
                    if c.row >= grid.n_rows || c.col >= grid.n_cols {
                        return spec_err(format!("event cell {s} is outside the grid"));
                    }
                    c
                }
                EventSite::Point([lat, lon]) => grid
                    .locate(*lat, *lon)
                    .ok_or_else(|| Error::InvalidScenario(format!("event point ({lat}, {lon}) outside the bbox")))?,
            };
            if !(ev.amplitude > 1.0) || ev.duration_windows == 0 || ev.types.is_empty() {
                return spec_err("events need amplitude > 1, a positive duration and at least one type".into());
            }
            let start = match calendar.axis.index_of(ev.start) {
                Some(s) if is_window_aligned(ev.start) && s + ev.duration_windows <= calendar.len() => s,
                _ => return spec_err(format!("event at {} does not fit the period", ev.start)),
            };
            let end = start + ev.duration_windows - 1;
            let mut types = [false; ActivityType::COUNT];
            ev.types.iter().for_each(|t| types[t.ordinal()] = true);
            for (a, c) in cells.iter().enumerate() {
                if *c == cell {
                    antenna_events[a].push(AntennaEvent {
                        windows: start..end + 1,
                        amplitude: ev.amplitude,
                        types,
                    });
                }
            }
            event_truth.push(EventTruth {
                region_id: cell.region_id(),
                start_window: calendar.axis.time_at(start),
                end_window: calendar.axis.time_at(end),
                start_index: start,
                end_index: end,
                amplitude: ev.amplitude,
                types: ev.types.clone(),
            });
        }

        let truth = GroundTruth {
            seed: spec.seed,
            antennas: antennas
                .iter()
                .zip(&archetypes)
                .zip(&cells)
                .map(|((a, arch), c)| AntennaTruth {
                    antenna_id: a.antenna_id.clone(),
                    archetype: *arch,
                    cell: c.region_id(),
                })
                .collect(),
            cells: zoning
                .iter()
                .enumerate()
                .map(|(i, a)| (grid.cell_at(i).region_id(), *a))
                .collect(),
            events: event_truth,
            holidays: spec.holidays.clone(),
        };

        Ok(Scenario {
            spec,
            grid,
            calendar,
            antennas,
            truth,
            archetypes,
            scales,
            rates,
            window_bin,
            window_factor,
            antenna_events,
        })
    }

    pub fn archetype(&self, antenna: usize) -> Archetype {
        self.archetypes[antenna]
    }

    /// Noise-free expected count.
    pub fn expected(&self, antenna: usize, window: usize, t: ActivityType) -> f64 {
        let k = t.ordinal();
        let mut rate = self.scales[antenna]
            * self.spec.base_volume[k]
            * self.rates[self.archetypes[antenna] as usize][k][self.window_bin[window] as usize]
            * self.window_factor[window];
        for ev in &self.antenna_events[antenna] {
            if ev.types[k] && ev.windows.contains(&window) {
                rate *= ev.amplitude;
            }
        }
        rate
    }

    /// Realized counts of one antenna for every window; `None` for dropped
    /// windows.
    pub fn antenna_counts(&self, antenna: usize) -> Vec<Option<PerType<u64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(antenna as u64 + 1);
        let sigma = self.spec.noise_sigma;
        let mut out = Vec::with_capacity(self.calendar.len());
        for w in 0..self.calendar.len() {
            if self.spec.missing_rate > 0.0 && rng.random::<f64>() < self.spec.missing_rate {
                out.push(None);
                continue;
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            let noise = (sigma * z - 0.5 * sigma * sigma).exp();
            let counts = std::array::from_fn(|k| {
                let lambda = self.expected(antenna, w, ActivityType::ALL[k]) * noise;
                if lambda > 0.0 {
                    Poisson::new(lambda).expect("finite positive rate").sample(&mut rng) as u64
                } else {
                    0
                }
            });
            out.push(Some(counts));
        }
        out
    }

    /// Generates antennas in parallel batches and hands them to `f` in
    /// antenna order.
    pub fn for_each_antenna<F>(&self, mut f: F) -> Result<()>
    where
        F: FnMut(usize, &[Option<PerType<u64>>]) -> Result<()>,
    {
        let batch = rayon::current_num_threads().max(1) * 4;
        let n = self.antennas.len();
        for first in (0..n).step_by(batch) {
            let ids: Vec<usize> = (first..(first + batch).min(n)).collect();
            let counts: Vec<_> = ids.par_iter().map(|&a| self.antenna_counts(a)).collect();
            for (a, c) in ids.into_iter().zip(counts) {
                f(a, &c)?;
            }
        }
        Ok(())
    }

    /// Aggregates the generated activity without going through CSV.
    pub fn aggregate(&self) -> Result<(AssignmentTable, Aggregation)> {
        let table = assign_antennas(&self.grid, &[], &self.antennas);
        let agg = self.aggregate_with(&table)?;
        Ok((table, agg))
    }

    pub fn aggregate_with(&self, table: &AssignmentTable) -> Result<Aggregation> {
        let pos: Vec<Option<usize>> = self.antennas.iter().map(|a| table.position(&a.antenna_id)).collect();
        let mut agg = Aggregator::new(table, &self.spec.city);
        self.for_each_antenna(|a, counts| {
            if let Some(p) = pos[a] {
                for (w, c) in counts.iter().enumerate() {
                    if let Some(c) = c {
                        agg.add_indexed(p, w, c);
                    }
                }
            }
            Ok(())
        })?;
        agg.finish()
    }

    pub fn write_activity<W: Write>(&self, w: &mut W) -> Result<()> {
        let stamps: Vec<String> = (0..self.calendar.len())
            .map(|i| format_utc(self.calendar.axis.time_at(i)))
            .collect();
        let io = |e| Error::io("activity.csv", e);
        write_activity_header(w).map_err(io)?;
        self.for_each_antenna(|a, counts| {
            let id = &self.antennas[a].antenna_id;
            for (ts, c) in stamps.iter().zip(counts) {
                if let Some(c) = c {
                    writeln!(w, "{id},{ts},{},{},{},{},{}", c[0], c[1], c[2], c[3], c[4]).map_err(io)?;
                }
            }
            Ok(())
        })
    }

    /// Writes `city.json`, `antennas.csv`, `activity.csv` and
    /// `ground_truth.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
        };
        let mut f = create("city.json")?;
        serde_json::to_writer_pretty(&mut f, &self.spec.city)?;
        f.flush().map_err(|e| Error::io(dir.join("city.json"), e))?;

        let mut f = create("antennas.csv")?;
        write_antennas(&mut f, &self.antennas)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(dir.join("antennas.csv"), e))?;

        let mut f = create("activity.csv")?;
        self.write_activity(&mut f)?;
        f.flush().map_err(|e| Error::io(dir.join("activity.csv"), e))?;

        let mut f = create("ground_truth.json")?;
        serde_json::to_writer_pretty(&mut f, &self.truth)?;
        f.flush().map_err(|e| Error::io(dir.join("ground_truth.json"), e))?;
        Ok(())
    }
}
