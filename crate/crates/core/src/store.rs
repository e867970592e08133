//! On-disk computed store: layout, build pipeline and manifest.
//!
//! ```text
//! {root}/{city}/manifest.json
//!               meta.json
//!               regions.json
//!               series/{region}.{TYPE}.{res}.json
//!               profiles/{region}.{TYPE}.{raw|norm}.json
//!               residuals/{region}.{TYPE}.json
//!               events/{region}.{TYPE}.jsonl
//!               clusters/k{k}.json, clusters/select_k.json
//!               density/{metric}.{TYPE}[.{OTHER}].{period}.json
//! ```
//!
//! Object keys are escaped with [`escape_key`]. A build writes into a
//! staging directory next to the target and renames it into place only when
//! every artifact has been written; on failure the staging directory is
//! removed. No artifact embeds a timestamp, so rebuilding unchanged inputs
//! yields byte-identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, BufReader, Read};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, Duration, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activity::ActivityType;
use crate::clusters::{build_features, kmeans, select_k, KMeansParams, KSelection};
use crate::config::CityConfig;
use crate::density::{pair_ratio_map, ratio_map, volume_map, DensityMap, Metric, Period};
use crate::error::{Error, Result};
use crate::events::{detect, write_jsonl, DetectParams};
use crate::ingest::{ingest_activity, parse_antennas, RowError};
use crate::profiles::{normalize, resample, residuals, typical_week, Resolution, WeeklyProfile};
use crate::spatial::{
    assign_antennas, build_grid, parse_districts, Aggregation, Aggregator, AssignmentTable, CellIndex, District, Grid,
    RegionSeries, CITY_REGION_ID,
};
use crate::time::{LocalCalendar, WeekId, WindowAxis};

pub const STORE_VERSION: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Escapes every byte outside `[A-Za-z0-9_.-]` as `~XX` (uppercase hex).
pub fn escape_key(key: &str) -> String {
    let mut out = String::with_capacity(key.len());
    for b in key.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-') {
            out.push(b as char);
        } else {
            out.push_str(&format!("~{b:02X}"));
        }
    }
    out
}

/// Paths of every artifact inside one city directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Layout { dir: dir.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn meta(&self) -> PathBuf {
        self.dir.join("meta.json")
    }

    pub fn regions(&self) -> PathBuf {
        self.dir.join("regions.json")
    }

    pub fn series(&self, region: &str, t: ActivityType, res: Resolution) -> PathBuf {
        self.dir.join("series").join(format!("{}.{t}.{res}.json", escape_key(region)))
    }

    pub fn profile(&self, region: &str, t: ActivityType, normalized: bool) -> PathBuf {
        let form = if normalized { "norm" } else { "raw" };
        self.dir.join("profiles").join(format!("{}.{t}.{form}.json", escape_key(region)))
    }

    pub fn residuals(&self, region: &str, t: ActivityType) -> PathBuf {
        self.dir.join("residuals").join(format!("{}.{t}.json", escape_key(region)))
    }

    pub fn events(&self, region: &str, t: ActivityType) -> PathBuf {
        self.dir.join("events").join(format!("{}.{t}.jsonl", escape_key(region)))
    }

    pub fn cluster_model(&self, k: usize) -> PathBuf {
        self.dir.join("clusters").join(format!("k{k}.json"))
    }

    pub fn select_k(&self) -> PathBuf {
        self.dir.join("clusters").join("select_k.json")
    }

    pub fn density(&self, metric: Metric, t: ActivityType, other: Option<ActivityType>, period: &str) -> PathBuf {
        let name = match other {
            Some(o) => format!("{}.{t}.{o}.{}.json", metric.as_str(), escape_key(period)),
            None => format!("{}.{t}.{}.json", metric.as_str(), escape_key(period)),
        };
        self.dir.join("density").join(name)
    }
}

/// Series export. The 15-minute form carries `start` and `step_minutes`;
/// coarser forms list bin starts and window counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesExport {
    pub region_id: String,
    pub activity: ActivityType,
    pub resolution: Resolution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_minutes: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub starts: Option<Vec<DateTime<Utc>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub windows: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub present: Option<Vec<u32>>,
    pub values: Vec<Option<u64>>,
}

impl SeriesExport {
    pub fn build(series: &RegionSeries, t: ActivityType, res: Resolution, calendar: &LocalCalendar) -> Self {
        if res == Resolution::Min15 {
            let v = series.values(t);
            return SeriesExport {
                region_id: series.region_id.clone(),
                activity: t,
                resolution: res,
                start: Some(calendar.axis.start),
                step_minutes: Some(15),
                starts: None,
                windows: None,
                present: None,
                values: (0..series.len()).map(|i| series.presence[i].then_some(v[i])).collect(),
            };
        }
        let bins = resample(series, t, res, calendar);
        SeriesExport {
            region_id: series.region_id.clone(),
            activity: t,
            resolution: res,
            start: None,
            step_minutes: None,
            starts: Some(bins.iter().map(|b| b.start).collect()),
            windows: Some(bins.iter().map(|b| b.windows).collect()),
            present: Some(bins.iter().map(|b| b.present).collect()),
            values: bins.iter().map(|b| b.value).collect(),
        }
    }

    /// Keeps only entries whose start lies in `[from, to)`.
    pub fn slice(&self, from: Option<DateTime<Utc>>, to: Option<DateTime<Utc>>) -> SeriesExport {
        let keep = |t: DateTime<Utc>| from.is_none_or(|f| t >= f) && to.is_none_or(|e| t < e);
        let mut out = self.clone();
        if let (Some(start), Some(step)) = (self.start, self.step_minutes) {
            let at = |i: usize| start + Duration::minutes(step as i64 * i as i64);
            let idx: Vec<usize> = (0..self.values.len()).filter(|&i| keep(at(i))).collect();
            out.start = Some(idx.first().map_or(start, |&i| at(i)));
            out.values = idx.iter().map(|&i| self.values[i]).collect();
        } else if let Some(starts) = &self.starts {
            let idx: Vec<usize> = (0..starts.len()).filter(|&i| keep(starts[i])).collect();
            let pick = |v: &Option<Vec<u32>>| v.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect());
            out.windows = pick(&self.windows);
            out.present = pick(&self.present);
            out.starts = Some(idx.iter().map(|&i| starts[i]).collect());
            out.values = idx.iter().map(|&i| self.values[i]).collect();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Cell,
    District,
    City,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    #[serde(rename = "type")]
    pub kind: String,
    /// GeoJSON coordinates (`[lon, lat]` positions).
    pub coordinates: serde_json::Value,
}

fn ring_coords(ring: &[(f64, f64)]) -> Vec<[f64; 2]> {
    let mut v: Vec<[f64; 2]> = ring.iter().map(|&(lat, lon)| [lon, lat]).collect();
    if let Some(first) = v.first().copied() {
        v.push(first);
    }
    v
}

impl Geometry {
    fn polygon(ring: &[(f64, f64)]) -> Self {
        Geometry {
            kind: "Polygon".into(),
            coordinates: serde_json::json!([ring_coords(ring)]),
        }
    }

    fn district(d: &District) -> Self {
        let polys: Vec<Vec<Vec<[f64; 2]>>> = d
            .polygons
            .iter()
            .map(|p| std::iter::once(&p.exterior).chain(&p.holes).map(|r| ring_coords(r)).collect())
            .collect();
        Geometry {
            kind: "MultiPolygon".into(),
            coordinates: serde_json::json!(polys),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionInfo {
    pub region_id: String,
    pub kind: RegionKind,
    pub name: String,
    pub n_antennas: usize,
    pub geometry: Geometry,
}

fn default_k() -> usize {
    5
}

fn default_k_range() -> Vec<usize> {
    (2..=8).collect()
}

fn default_types() -> Vec<ActivityType> {
    ActivityType::ALL.to_vec()
}

/// Knobs of the compute stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    #[serde(default = "default_k")]
    pub k: usize,
    /// Values of k scored by `select_k`; a model is stored for each.
    #[serde(default = "default_k_range")]
    pub k_range: Vec<usize>,
    /// Feature types for clustering.
    #[serde(default = "default_types")]
    pub types: Vec<ActivityType>,
    /// Local weeks left out of typical weeks.
    #[serde(default)]
    pub exclude_weeks: BTreeSet<WeekId>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub detect: DetectParams,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            k: default_k(),
            k_range: default_k_range(),
            types: default_types(),
            exclude_weeks: BTreeSet::new(),
            seed: 0,
            detect: DetectParams::default(),
        }
    }
}

/// Counts from the ingest stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub antennas: usize,
    pub antennas_rejected: usize,
    pub antennas_unplaced: usize,
    pub activity_rows: u64,
    pub activity_accepted: u64,
    pub activity_rejected: u64,
    pub unknown_antenna: u64,
    pub outside_period: u64,
}

/// Everything the compute stage needs, whether read from CSV or generated
/// in memory.
pub struct CityData {
    pub config: CityConfig,
    pub grid: Grid,
    pub districts: Vec<District>,
    pub table: AssignmentTable,
    pub aggregation: Aggregation,
    pub summary: IngestSummary,
    /// Rejected rows by file name.
    pub rejections: BTreeMap<String, Vec<RowError>>,
    /// SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
}

impl CityData {
    pub fn from_aggregation(
        config: CityConfig,
        districts: Vec<District>,
        table: AssignmentTable,
        aggregation: Aggregation,
    ) -> Result<Self> {
        let grid = build_grid(&config)?;
        let summary = IngestSummary {
            antennas: table.len() + table.unplaced.len(),
            antennas_unplaced: table.unplaced.len(),
            activity_rows: aggregation.report.accepted,
            activity_accepted: aggregation.report.accepted,
            unknown_antenna: aggregation.report.unknown_antenna,
            outside_period: aggregation.report.outside_period,
            ..Default::default()
        };
        let mut inputs = BTreeMap::new();
        inputs.insert("city.json".into(), hex::encode(Sha256::digest(serde_json::to_vec(&config)?)));
        Ok(CityData {
            config,
            grid,
            districts,
            table,
            aggregation,
            summary,
            rejections: BTreeMap::new(),
            inputs,
        })
    }
}

struct HashingReader<R> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> Read for HashingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
}

fn open_hashed(path: &Path) -> Result<HashingReader<BufReader<File>>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(HashingReader {
        inner: BufReader::with_capacity(1 << 20, f),
        hasher: Sha256::new(),
    })
}

fn drain_digest<R: Read>(mut r: HashingReader<R>, path: &Path) -> Result<String> {
    io::copy(&mut r, &mut io::sink()).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(r.hasher.finalize()))
}

/// Activity files of a data directory: `activity.csv` and `activity-*.csv`,
/// sorted by name.
pub fn activity_files(data_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(data_dir).map_err(|e| Error::io(data_dir, e))? {
        let entry = entry.map_err(|e| Error::io(data_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == "activity.csv" || (name.starts_with("activity-") && name.ends_with(".csv")) {
            files.push(entry.path());
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Store(format!("no activity*.csv in {}", data_dir.display())));
    }
    Ok(files)
}

/// Parses and validates the input files of one city and aggregates them.
pub fn load_inputs(config: &CityConfig, data_dir: &Path) -> Result<CityData> {
    config.validate()?;
    let grid = build_grid(config)?;
    let mut inputs = BTreeMap::new();
    let mut rejections = BTreeMap::new();
    inputs.insert("city.json".to_string(), hex::encode(Sha256::digest(serde_json::to_vec(config)?)));

    let path = data_dir.join("antennas.csv");
    let mut r = open_hashed(&path)?;
    let parsed = parse_antennas(&mut r, Some(&config.bbox))?;
    inputs.insert("antennas.csv".into(), drain_digest(r, &path)?);
    for e in parsed.rejected.iter().take(20) {
        log::warn!("antennas.csv {e}");
    }
    let antennas_rejected = parsed.rejected.len();
    if !parsed.rejected.is_empty() {
        rejections.insert("antennas.csv".to_string(), parsed.rejected);
    }

    let path = data_dir.join("districts.geojson");
    let districts = if path.exists() {
        let mut r = open_hashed(&path)?;
        let mut text = String::new();
        r.read_to_string(&mut text).map_err(|e| Error::io(&path, e))?;
        let d = parse_districts(text.as_bytes())?;
        inputs.insert("districts.geojson".into(), drain_digest(r, &path)?);
        d
    } else {
        Vec::new()
    };

    let table = assign_antennas(&grid, &districts, &parsed.antennas);
    let mut summary = IngestSummary {
        antennas: parsed.antennas.len(),
        antennas_rejected,
        antennas_unplaced: table.unplaced.len(),
        ..Default::default()
    };
    let mut agg = Aggregator::new(&table, config);
    for path in activity_files(data_dir)? {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        log::info!("ingesting {}", path.display());
        let mut r = open_hashed(&path)?;
        let report = ingest_activity(&mut r, |rec| agg.add(&rec))?;
        inputs.insert(name.clone(), drain_digest(r, &path)?);
        summary.activity_rows += report.data_rows;
        summary.activity_accepted += report.accepted;
        summary.activity_rejected += report.rejected.len() as u64;
        if !report.rejected.is_empty() {
            rejections.insert(name, report.rejected);
        }
    }
    let aggregation = agg.finish()?;
    summary.unknown_antenna = aggregation.report.unknown_antenna;
    summary.outside_period = aggregation.report.outside_period;
    Ok(CityData {
        config: config.clone(),
        grid,
        districts,
        table,
        aggregation,
        summary,
        rejections,
        inputs,
    })
}

/// A named density period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodEntry {
    pub key: String,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

/// The full period (`all`) plus every complete Monday-to-Monday UTC week.
pub fn density_periods(axis: &WindowAxis) -> Vec<PeriodEntry> {
    let mut out = vec![PeriodEntry {
        key: "all".into(),
        start: axis.start,
        end: axis.end(),
    }];
    let first = axis.start.date_naive();
    let offset = (7 - first.weekday().num_days_from_monday() as i64) % 7;
    let mut monday = axis.start + Duration::days(offset);
    while monday + Duration::weeks(1) <= axis.end() {
        out.push(PeriodEntry {
            key: WeekId::of(monday.date_naive()).to_string(),
            start: monday,
            end: monday + Duration::weeks(1),
        });
        monday += Duration::weeks(1);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub city_id: String,
    pub store_version: u32,
    pub config: CityConfig,
    pub n_rows: u32,
    pub n_cols: u32,
    pub n_windows: usize,
    pub period_start: DateTime<Utc>,
    pub period_end: DateTime<Utc>,
    pub ingest: IngestSummary,
    pub resolutions: Vec<Resolution>,
    #[serde(default)]
    pub cluster_ks: Vec<usize>,
    #[serde(default)]
    pub density_periods: Vec<PeriodEntry>,
    #[serde(default)]
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingested,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub store_version: u32,
    pub city_id: String,
    pub stage: Stage,
    pub config: CityConfig,
    pub options: Option<BuildOptions>,
    pub inputs: BTreeMap<String, String>,
    pub code_version: String,
    /// SHA-256 over every artifact path and content, in path order.
    pub artifacts_digest: String,
    pub n_artifacts: usize,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec(value)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn make_dirs(layout: &Layout) -> Result<()> {
    for sub in ["series", "profiles", "residuals", "events", "clusters", "density"] {
        let p = layout.dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn region_infos(data: &CityData) -> Vec<RegionInfo> {
    let agg = &data.aggregation;
    let cell_counts = data.table.cell_counts();
    let mut out: Vec<RegionInfo> = agg
        .cells
        .keys()
        .map(|c| RegionInfo {
            region_id: c.region_id(),
            kind: RegionKind::Cell,
            name: c.region_id(),
            n_antennas: cell_counts.get(c).copied().unwrap_or(0),
            geometry: Geometry::polygon(&data.grid.cell_ring(*c)),
        })
        .collect();
    for s in &agg.districts {
        let idx = data.table.district_ids.iter().position(|d| *d == s.region_id).unwrap();
        let d = &data.districts[idx];
        out.push(RegionInfo {
            region_id: d.district_id.clone(),
            kind: RegionKind::District,
            name: d.name.clone(),
            n_antennas: data.table.entries.iter().filter(|e| e.district == Some(idx)).count(),
            geometry: Geometry::district(d),
        });
    }
    let b = data.config.bbox;
    out.push(RegionInfo {
        region_id: CITY_REGION_ID.into(),
        kind: RegionKind::City,
        name: data.config.city_id.clone(),
        n_antennas: data.table.len(),
        geometry: Geometry::polygon(&[
            (b.lat_min, b.lon_min),
            (b.lat_min, b.lon_max),
            (b.lat_max, b.lon_max),
            (b.lat_max, b.lon_min),
        ]),
    });
    out
}

fn write_ingest_artifacts(layout: &Layout, data: &CityData, calendar: &LocalCalendar) -> Result<Meta> {
    make_dirs(layout)?;
    write_json(&layout.regions(), &region_infos(data))?;
    let series: Vec<&RegionSeries> = data.aggregation.regions().collect();
    series.par_iter().try_for_each(|s| {
        for t in ActivityType::ALL {
            for res in Resolution::ALL {
                write_json(&layout.series(&s.region_id, t, res), &SeriesExport::build(s, t, res, calendar))?;
            }
        }
        Ok::<_, Error>(())
    })?;
    if !data.rejections.is_empty() {
        write_json(&layout.dir.join("rejections.json"), &data.rejections)?;
    }
    let meta = Meta {
        city_id: data.config.city_id.clone(),
        store_version: STORE_VERSION,
        config: data.config.clone(),
        n_rows: data.grid.n_rows,
        n_cols: data.grid.n_cols,
        n_windows: calendar.len(),
        period_start: calendar.axis.start,
        period_end: calendar.axis.end(),
        ingest: data.summary.clone(),
        resolutions: Resolution::ALL.to_vec(),
        cluster_ks: Vec::new(),
        density_periods: Vec::new(),
        events: 0,
    };
    write_json(&layout.meta(), &meta)?;
    Ok(meta)
}

/// Writes profiles, residuals, events, clusters and density maps.
fn write_compute_artifacts(
    layout: &Layout,
    config: &CityConfig,
    grid: &Grid,
    series: &[RegionSeries],
    options: &BuildOptions,
    meta: &mut Meta,
) -> Result<()> {
    make_dirs(layout)?;
    let calendar = LocalCalendar::for_city(config);
    let jobs: Vec<(&RegionSeries, ActivityType)> =
        series.iter().flat_map(|s| ActivityType::ALL.map(|t| (s, t))).collect();
    let results: Vec<(String, ActivityType, WeeklyProfile, usize)> = jobs
        .par_iter()
        .map(|&(s, t)| {
            let raw = typical_week(s, t, &calendar, &options.exclude_weeks);
            let norm = normalize(&raw);
            let res = residuals(s, t, &raw, &calendar);
            let events = detect(&res, &calendar, &options.detect)?;
            write_json(&layout.profile(&s.region_id, t, false), &raw)?;
            write_json(&layout.profile(&s.region_id, t, true), &norm)?;
            write_json(&layout.residuals(&s.region_id, t), &res)?;
            let path = layout.events(&s.region_id, t);
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &events).map_err(|e| Error::io(&path, e))?;
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
            Ok((s.region_id.clone(), t, norm, events.len()))
        })
        .collect::<Result<_>>()?;
    meta.events = results.iter().map(|r| r.3).sum();

    let cells: BTreeMap<CellIndex, RegionSeries> = series
        .iter()
        .filter_map(|s| s.region_id.parse::<CellIndex>().ok().map(|c| (c, s.clone())))
        .collect();
    let cell_profiles: BTreeMap<(String, ActivityType), WeeklyProfile> = results
        .into_iter()
        .filter(|r| r.0.parse::<CellIndex>().is_ok())
        .map(|(r, t, p, _)| ((r, t), p))
        .collect();

    let features = build_features(&cell_profiles, &options.types)?;
    let n = features.vectors.len();
    let mut ks: BTreeSet<usize> = options.k_range.iter().copied().collect();
    ks.insert(options.k);
    meta.cluster_ks = Vec::new();
    for k in ks {
        if k == 0 || k > n {
            log::warn!("skipping k = {k}: only {n} cells have complete profiles");
            continue;
        }
        let model = kmeans(&features, &KMeansParams::new(k, options.seed))?;
        write_json(&layout.cluster_model(k), &model)?;
        meta.cluster_ks.push(k);
    }
    let scored: Vec<usize> = options.k_range.iter().copied().filter(|&k| k >= 2 && k < n).collect();
    let table: Vec<KSelection> = if scored.is_empty() {
        Vec::new()
    } else {
        select_k(&features, &scored, options.seed)?
    };
    write_json(&layout.select_k(), &table)?;

    let axis = calendar.axis;
    let periods = density_periods(&axis);
    periods.par_iter().try_for_each(|p| {
        let period = Period::new(p.start, p.end);
        let write = |m: DensityMap| write_json(&layout.density(m.metric, m.activity, m.other, &p.key), &m);
        for t in ActivityType::ALL {
            write(volume_map(&cells, grid, &axis, t, period)?)?;
            write(ratio_map(&cells, grid, &axis, t, period)?)?;
            for o in ActivityType::ALL {
                if o != t {
                    write(pair_ratio_map(&cells, grid, &axis, t, o, period)?)?;
                }
            }
        }
        Ok::<_, Error>(())
    })?;
    meta.density_periods = periods;
    write_json(&layout.meta(), meta)?;
    Ok(())
}

fn artifacts_digest(dir: &Path) -> Result<(String, usize)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = entry.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(&p, root, out)?;
            } else if p != root.join("manifest.json") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    let mut rel: Vec<(String, PathBuf)> = files
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/"), p))
        .collect();
    rel.sort();
    let digests: Vec<[u8; 32]> = rel
        .par_iter()
        .map(|(_, p)| {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(Sha256::digest(&bytes).into())
        })
        .collect::<Result<_>>()?;
    let mut h = Sha256::new();
    for ((name, _), d) in rel.iter().zip(&digests) {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(d);
    }
    Ok((hex::encode(h.finalize()), rel.len()))
}

fn write_manifest(
    layout: &Layout,
    config: &CityConfig,
    stage: Stage,
    options: Option<&BuildOptions>,
    inputs: &BTreeMap<String, String>,
) -> Result<Manifest> {
    let (digest, n) = artifacts_digest(&layout.dir)?;
    let manifest = Manifest {
        store_version: STORE_VERSION,
        city_id: config.city_id.clone(),
        stage,
        config: config.clone(),
        options: options.cloned(),
        inputs: inputs.clone(),
        code_version: CODE_VERSION.into(),
        artifacts_digest: digest,
        n_artifacts: n,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(layout.manifest(), bytes).map_err(|e| Error::io(layout.manifest(), e))?;
    Ok(manifest)
}

/// Runs `fill` against a fresh staging directory and moves the result to
/// `target`, replacing any previous content. The staging directory is
/// removed on failure.
fn staged<T>(target: &Path, fill: impl FnOnce(&Layout) -> Result<T>) -> Result<T> {
    let parent = target.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = target.file_name().unwrap().to_string_lossy();
    let stage = parent.join(format!(".{name}.staging-{}", std::process::id()));
    if stage.exists() {
        fs::remove_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
    }
    fs::create_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
    let out = match fill(&Layout::new(&stage)) {
        Ok(v) => v,
        Err(e) => {
            let _ = fs::remove_dir_all(&stage);
            return Err(e);
        }
    };
    let old = parent.join(format!(".{name}.old-{}", std::process::id()));
    if target.exists() {
        fs::rename(target, &old).map_err(|e| Error::io(target, e))?;
    }
    if let Err(e) = fs::rename(&stage, target) {
        let _ = fs::rename(&old, target);
        let _ = fs::remove_dir_all(&stage);
        return Err(Error::io(target, e));
    }
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(out)
}

pub fn city_dir(store_root: &Path, city_id: &str) -> PathBuf {
    store_root.join(escape_key(city_id))
}

/// Full pipeline from already-loaded inputs into `{store_root}/{city}`.
pub fn build_from(data: &CityData, store_root: &Path, options: &BuildOptions) -> Result<Manifest> {
    let target = city_dir(store_root, &data.config.city_id);
    staged(&target, |layout| {
        let calendar = LocalCalendar::for_city(&data.config);
        let mut meta = write_ingest_artifacts(layout, data, &calendar)?;
        let series: Vec<RegionSeries> = data.aggregation.regions().cloned().collect();
        write_compute_artifacts(layout, &data.config, &data.grid, &series, options, &mut meta)?;
        write_manifest(layout, &data.config, Stage::Complete, Some(options), &data.inputs)
    })
}

/// Reads, validates and aggregates the inputs, then writes the full store.
pub fn build_store(config: &CityConfig, data_dir: &Path, store_root: &Path, options: &BuildOptions) -> Result<Manifest> {
    let data = load_inputs(config, data_dir)?;
    build_from(&data, store_root, options)
}

/// Ingest stage only: regions, series and meta.
pub fn write_ingested(data: &CityData, store_root: &Path) -> Result<Manifest> {
    let target = city_dir(store_root, &data.config.city_id);
    staged(&target, |layout| {
        let calendar = LocalCalendar::for_city(&data.config);
        write_ingest_artifacts(layout, data, &calendar)?;
        write_manifest(layout, &data.config, Stage::Ingested, None, &data.inputs)
    })
}

/// Rebuilds a region series from its stored 15-minute exports.
fn load_series(layout: &Layout, region_id: &str, n_windows: usize) -> Result<RegionSeries> {
    let mut s = RegionSeries::empty(region_id, n_windows);
    for t in ActivityType::ALL {
        let path = layout.series(region_id, t, Resolution::Min15);
        let e: SeriesExport = read_json(&path)?;
        if e.values.len() != n_windows {
            return Err(Error::Store(format!("{} has {} windows, expected {n_windows}", path.display(), e.values.len())));
        }
        for (i, v) in e.values.iter().enumerate() {
            if let Some(v) = v {
                s.activity[t.ordinal()][i] = *v;
                s.presence[i] = true;
            }
        }
    }
    Ok(s)
}

/// Compute stage over an existing store city directory.
pub fn compute(city_dir: &Path, options: &BuildOptions) -> Result<Manifest> {
    let src = Layout::new(city_dir);
    let manifest = Manifest::load(&src.manifest())?;
    if manifest.store_version != STORE_VERSION {
        return Err(Error::Store(format!("unsupported store version {}", manifest.store_version)));
    }
    let mut meta: Meta = read_json(&src.meta())?;
    let regions: Vec<RegionInfo> = read_json(&src.regions())?;
    let config = manifest.config.clone();
    let grid = build_grid(&config)?;
    let series: Vec<RegionSeries> = regions
        .iter()
        .map(|r| load_series(&src, &r.region_id, meta.n_windows))
        .collect::<Result<_>>()?;
    staged(city_dir, |layout| {
        make_dirs(layout)?;
        for f in ["regions.json", "rejections.json"] {
            if src.dir.join(f).exists() {
                fs::copy(src.dir.join(f), layout.dir.join(f)).map_err(|e| Error::io(src.dir.join(f), e))?;
            }
        }
        for r in &regions {
            for t in ActivityType::ALL {
                for res in Resolution::ALL {
                    let from = src.series(&r.region_id, t, res);
                    fs::copy(&from, layout.series(&r.region_id, t, res)).map_err(|e| Error::io(&from, e))?;
                }
            }
        }
        write_compute_artifacts(layout, &config, &grid, &series, options, &mut meta)?;
        write_manifest(layout, &config, Stage::Complete, Some(options), &manifest.inputs)
    })
}
