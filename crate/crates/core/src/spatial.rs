//! Analysis grid, district polygons, antenna assignment and aggregation of
//! antenna records into per-region series.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activity::{ActivityType, PerType};
use crate::config::{BBox, CityConfig};
use crate::error::{Error, Result};
use crate::ingest::{ActivityRecord, Antenna};
use crate::time::WindowAxis;

/// Meters per degree of latitude (and of longitude at the equator).
pub const METERS_PER_DEGREE: f64 = 111_320.0;

pub const CITY_REGION_ID: &str = "city";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub row: u32,
    pub col: u32,
}

impl CellIndex {
    pub fn new(row: u32, col: u32) -> Self {
        CellIndex { row, col }
    }

    /// Region id of the cell, `"row:col"`.
    pub fn region_id(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for CellIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.row, self.col)
    }
}

impl FromStr for CellIndex {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        let (r, c) = s.split_once(':').ok_or(())?;
        Ok(CellIndex::new(r.parse().map_err(|_| ())?, c.parse().map_err(|_| ())?))
    }
}

/// Regular grid over a city bbox using an equirectangular approximation at
/// the bbox mid-latitude. Row 0 sits at `lat_min`, column 0 at `lon_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub bbox: BBox,
    pub cell_size_m: f64,
    pub n_rows: u32,
    pub n_cols: u32,
    pub meters_per_deg_lat: f64,
    pub meters_per_deg_lon: f64,
}

pub fn build_grid(config: &CityConfig) -> Result<Grid> {
    Grid::new(config.bbox, config.cell_size_m)
}

impl Grid {
    pub fn new(bbox: BBox, cell_size_m: f64) -> Result<Self> {
        if !(bbox.lat_max > bbox.lat_min && bbox.lon_max > bbox.lon_min) {
            return Err(Error::DegenerateBbox(format!(
                "{:?}",
                <[f64; 4]>::from(bbox)
            )));
        }
        if !(cell_size_m.is_finite() && cell_size_m > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cell_size_m must be > 0, got {cell_size_m}"
            )));
        }
        let m_lat = METERS_PER_DEGREE;
        let m_lon = METERS_PER_DEGREE * bbox.mid_lat().to_radians().cos();
        let n = |extent_deg: f64, m: f64| ((extent_deg * m / cell_size_m).ceil() as u32).max(1);
        Ok(Grid {
            bbox,
            cell_size_m,
            n_rows: n(bbox.lat_max - bbox.lat_min, m_lat),
            n_cols: n(bbox.lon_max - bbox.lon_min, m_lon),
            meters_per_deg_lat: m_lat,
            meters_per_deg_lon: m_lon,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows as usize * self.n_cols as usize
    }

    /// Row-major position of a cell.
    pub fn flat_index(&self, cell: CellIndex) -> usize {
        cell.row as usize * self.n_cols as usize + cell.col as usize
    }

    pub fn cell_at(&self, flat: usize) -> CellIndex {
        CellIndex::new((flat / self.n_cols as usize) as u32, (flat % self.n_cols as usize) as u32)
    }

    /// Southern edge latitude of row `r` (r may equal `n_rows`).
    pub fn row_edge(&self, r: u32) -> f64 {
        self.bbox.lat_min + r as f64 * (self.cell_size_m / self.meters_per_deg_lat)
    }

    /// Western edge longitude of column `c` (c may equal `n_cols`).
    pub fn col_edge(&self, c: u32) -> f64 {
        self.bbox.lon_min + c as f64 * (self.cell_size_m / self.meters_per_deg_lon)
    }

    pub fn cell_center(&self, cell: CellIndex) -> (f64, f64) {
        (
            0.5 * (self.row_edge(cell.row) + self.row_edge(cell.row + 1)),
            0.5 * (self.col_edge(cell.col) + self.col_edge(cell.col + 1)),
        )
    }

    /// Cell corners as a closed (lat, lon) ring, clipped to the bbox.
    pub fn cell_ring(&self, cell: CellIndex) -> Vec<(f64, f64)> {
        let s = self.row_edge(cell.row);
        let n = self.row_edge(cell.row + 1).min(self.bbox.lat_max);
        let w = self.col_edge(cell.col);
        let e = self.col_edge(cell.col + 1).min(self.bbox.lon_max);
        vec![(s, w), (s, e), (n, e), (n, w), (s, w)]
    }

    /// Locates a point. Cells are half-open `[edge, next_edge)` except the
    /// last row/column, which also owns the bbox max edge. Points outside the
    /// closed bbox yield `None`.
    pub fn locate(&self, lat: f64, lon: f64) -> Option<CellIndex> {
        if !self.bbox.contains(lat, lon) {
            return None;
        }
        let row = snap(lat, self.n_rows, self.meters_per_deg_lat / self.cell_size_m, |r| {
            self.row_edge(r)
        }, self.bbox.lat_min);
        let col = snap(lon, self.n_cols, self.meters_per_deg_lon / self.cell_size_m, |c| {
            self.col_edge(c)
        }, self.bbox.lon_min);
        Some(CellIndex::new(row, col))
    }
}

/// Index of the interval containing `v`, consistent with `edge()` even when
/// the direct division rounds across an edge.
fn snap(v: f64, n: u32, cells_per_deg: f64, edge: impl Fn(u32) -> f64, origin: f64) -> u32 {
    let guess = ((v - origin) * cells_per_deg).floor();
    let mut i = guess.clamp(0.0, (n - 1) as f64) as u32;
    while i + 1 < n && v >= edge(i + 1) {
        i += 1;
    }
    while i > 0 && v < edge(i) {
        i -= 1;
    }
    i
}

/// One polygon: exterior ring plus holes, vertices as (lat, lon), closing
/// vertex not repeated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolygonRings {
    pub exterior: Vec<(f64, f64)>,
    pub holes: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct District {
    pub district_id: String,
    pub name: String,
    pub polygons: Vec<PolygonRings>,
}

fn on_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    cross == 0.0
        && p.0 >= a.0.min(b.0)
        && p.0 <= a.0.max(b.0)
        && p.1 >= a.1.min(b.1)
        && p.1 <= a.1.max(b.1)
}

fn ring_edges(ring: &[(f64, f64)]) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
    (0..ring.len()).map(move |i| (ring[i], ring[(i + 1) % ring.len()]))
}

/// Even-odd crossing test for one ring; true on crossing parity odd.
fn ring_crossings(ring: &[(f64, f64)], lat: f64, lon: f64) -> bool {
    let mut inside = false;
    for ((alat, alon), (blat, blon)) in ring_edges(ring) {
        if (alat > lat) != (blat > lat) {
            let x = alon + (lat - alat) / (blat - alat) * (blon - alon);
            if lon < x {
                inside = !inside;
            }
        }
    }
    inside
}

impl PolygonRings {
    fn rings(&self) -> impl Iterator<Item = &Vec<(f64, f64)>> {
        std::iter::once(&self.exterior).chain(self.holes.iter())
    }

    fn on_boundary(&self, p: (f64, f64)) -> bool {
        self.rings()
            .any(|r| ring_edges(r).any(|(a, b)| on_segment(p, a, b)))
    }

    /// Even-odd rule over all rings; boundary points count as inside.
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        if self.on_boundary((lat, lon)) {
            return true;
        }
        self.rings()
            .fold(false, |acc, r| acc ^ ring_crossings(r, lat, lon))
    }
}

fn segments_intersect(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let orient = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
        let v = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
        v.partial_cmp(&0.0).map_or(0, |o| o as i8)
    };
    let (o1, o2, o3, o4) = (orient(p1, p2, q1), orient(p1, p2, q2), orient(q1, q2, p1), orient(q1, q2, p2));
    if o1 != o2 && o3 != o4 && o1 != 0 && o2 != 0 && o3 != 0 && o4 != 0 {
        return true;
    }
    (o1 == 0 && on_segment(q1, p1, p2))
        || (o2 == 0 && on_segment(q2, p1, p2))
        || (o3 == 0 && on_segment(p1, q1, q2))
        || (o4 == 0 && on_segment(p2, q1, q2))
}

fn validate_ring(ring: &[(f64, f64)]) -> std::result::Result<(), String> {
    if ring.len() < 3 {
        return Err(format!("ring has {} distinct vertices, need >= 3", ring.len()));
    }
    let n = ring.len();
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            let (c, d) = (ring[j], ring[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return Err(format!("ring self-intersects between edges {i} and {j}"));
            }
        }
    }
    Ok(())
}

/// Converts a GeoJSON `[lon, lat]` ring into an open (lat, lon) ring.
fn open_ring(coords: &[[f64; 2]]) -> Vec<(f64, f64)> {
    let mut ring: Vec<(f64, f64)> = coords.iter().map(|c| (c[1], c[0])).collect();
    while ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    ring
}

impl District {
    pub fn new(district_id: String, name: String, polygons: Vec<PolygonRings>) -> Result<Self> {
        if polygons.is_empty() {
            return Err(Error::InvalidDistrict {
                district_id,
                reason: "no polygons".into(),
            });
        }
        for ring in polygons.iter().flat_map(|p| p.rings()) {
            if let Err(reason) = validate_ring(ring) {
                return Err(Error::InvalidDistrict {
                    district_id,
                    reason,
                });
            }
        }
        Ok(District {
            district_id,
            name,
            polygons,
        })
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        self.polygons.iter().any(|p| p.contains(lat, lon))
    }
}

#[derive(Deserialize)]
struct FeatureCollection {
    features: Vec<Feature>,
}

#[derive(Deserialize)]
struct Feature {
    properties: FeatureProps,
    geometry: Geometry,
}

#[derive(Deserialize)]
struct FeatureProps {
    district_id: serde_json::Value,
    #[serde(default)]
    name: Option<String>,
}

#[derive(Deserialize)]
#[serde(tag = "type", content = "coordinates")]
enum Geometry {
    Polygon(Vec<Vec<[f64; 2]>>),
    MultiPolygon(Vec<Vec<Vec<[f64; 2]>>>),
}

fn polygon_from(rings: &[Vec<[f64; 2]>]) -> Option<PolygonRings> {
    let (ext, holes) = rings.split_first()?;
    Some(PolygonRings {
        exterior: open_ring(ext),
        holes: holes.iter().map(|h| open_ring(h)).collect(),
    })
}

/// Reads a `districts.geojson` FeatureCollection (Polygon/MultiPolygon
/// features with `district_id` and `name` properties), preserving file order.
pub fn parse_districts<R: Read>(reader: R) -> Result<Vec<District>> {
    let fc: FeatureCollection = serde_json::from_reader(reader)?;
    let mut out: Vec<District> = Vec::with_capacity(fc.features.len());
    for f in fc.features {
        let id = match f.properties.district_id {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        if id.is_empty() || id == crate::spatial::CITY_REGION_ID || id.parse::<CellIndex>().is_ok() {
            return Err(Error::InvalidDistrict {
                district_id: id,
                reason: "district_id must be non-empty and not clash with cell or city ids".into(),
            });
        }
        if out.iter().any(|d| d.district_id == id) {
            return Err(Error::InvalidDistrict {
                district_id: id,
                reason: "duplicate district_id".into(),
            });
        }
        let polygons: Vec<PolygonRings> = match &f.geometry {
            Geometry::Polygon(rings) => polygon_from(rings).into_iter().collect(),
            Geometry::MultiPolygon(polys) => polys.iter().filter_map(|p| polygon_from(p)).collect(),
        };
        let name = f.properties.name.unwrap_or_else(|| id.clone());
        out.push(District::new(id, name, polygons)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub antenna_id: String,
    pub cell: CellIndex,
    /// Index into the district list, in file order.
    pub district: Option<usize>,
}

/// Antenna → (cell, district) lookup.
#[derive(Debug, Clone, Default)]
pub struct AssignmentTable {
    pub entries: Vec<Assignment>,
    pub district_ids: Vec<String>,
    /// Antennas that could not be placed on the grid.
    pub unplaced: Vec<String>,
    index: HashMap<String, usize>,
}

impl AssignmentTable {
    pub fn get(&self, antenna_id: &str) -> Option<&Assignment> {
        self.index.get(antenna_id).map(|&i| &self.entries[i])
    }

    pub fn position(&self, antenna_id: &str) -> Option<usize> {
        self.index.get(antenna_id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Antenna count per occupied cell.
    pub fn cell_counts(&self) -> BTreeMap<CellIndex, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.cell).or_insert(0) += 1;
        }
        m
    }
}

pub fn assign_antennas(grid: &Grid, districts: &[District], antennas: &[Antenna]) -> AssignmentTable {
    let mut table = AssignmentTable {
        district_ids: districts.iter().map(|d| d.district_id.clone()).collect(),
        ..Default::default()
    };
    for a in antennas {
        let Some(cell) = grid.locate(a.lat, a.lon) else {
            table.unplaced.push(a.antenna_id.clone());
            continue;
        };
        let district = districts.iter().position(|d| d.contains(a.lat, a.lon));
        table.index.insert(a.antenna_id.clone(), table.entries.len());
        table.entries.push(Assignment {
            antenna_id: a.antenna_id.clone(),
            cell,
            district,
        });
    }
    table
}

/// Dense per-window activity of one region. Absent windows hold 0 with the
/// presence flag clear.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSeries {
    pub region_id: String,
    pub activity: PerType<Vec<u64>>,
    pub presence: Vec<bool>,
}

impl RegionSeries {
    pub fn empty(region_id: impl Into<String>, len: usize) -> Self {
        RegionSeries {
            region_id: region_id.into(),
            activity: std::array::from_fn(|_| vec![0; len]),
            presence: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.presence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.presence.is_empty()
    }

    pub fn values(&self, t: ActivityType) -> &[u64] {
        &self.activity[t.ordinal()]
    }

    fn add(&mut self, w: usize, counts: &PerType<u64>) {
        for (k, c) in counts.iter().enumerate() {
            self.activity[k][w] += c;
        }
        self.presence[w] = true;
    }

    fn merge(&mut self, other: &RegionSeries) {
        for k in 0..ActivityType::COUNT {
            for (a, b) in self.activity[k].iter_mut().zip(&other.activity[k]) {
                *a += b;
            }
        }
        for (a, b) in self.presence.iter_mut().zip(&other.presence) {
            *a |= b;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AggregateReport {
    pub accepted: u64,
    pub unknown_antenna: u64,
    pub outside_period: u64,
}

/// Output of aggregation: cells with at least one antenna, districts with at
/// least one antenna, and the whole city.
#[derive(Debug, Clone)]
pub struct Aggregation {
    pub cells: BTreeMap<CellIndex, RegionSeries>,
    pub districts: Vec<RegionSeries>,
    pub city: RegionSeries,
    pub report: AggregateReport,
}

impl Aggregation {
    /// All region series: cells, then districts, then the city.
    pub fn regions(&self) -> impl Iterator<Item = &RegionSeries> {
        self.cells
            .values()
            .chain(self.districts.iter())
            .chain(std::iter::once(&self.city))
    }
}

/// Streaming fold of activity records into region series. Shards built from
/// the same table can be combined with [`Aggregator::merge`].
#[derive(Debug, Clone)]
pub struct Aggregator<'a> {
    table: &'a AssignmentTable,
    axis: WindowAxis,
    antenna_cell: Vec<usize>,
    cells: Vec<RegionSeries>,
    cell_keys: Vec<CellIndex>,
    districts: Vec<RegionSeries>,
    city: RegionSeries,
    seen: Vec<Vec<u64>>,
    duplicate: Option<(String, chrono::DateTime<chrono::Utc>)>,
    report: AggregateReport,
}

impl<'a> Aggregator<'a> {
    pub fn new(table: &'a AssignmentTable, config: &CityConfig) -> Self {
        let axis = WindowAxis::for_city(config);
        let counts = table.cell_counts();
        let cell_keys: Vec<CellIndex> = counts.keys().copied().collect();
        let slot: HashMap<CellIndex, usize> =
            cell_keys.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        let antenna_cell = table.entries.iter().map(|e| slot[&e.cell]).collect();
        let words = axis.len.div_ceil(64);
        Aggregator {
            table,
            axis,
            antenna_cell,
            cells: cell_keys
                .iter()
                .map(|c| RegionSeries::empty(c.region_id(), axis.len))
                .collect(),
            cell_keys,
            districts: table
                .district_ids
                .iter()
                .map(|d| RegionSeries::empty(d.clone(), axis.len))
                .collect(),
            city: RegionSeries::empty(CITY_REGION_ID, axis.len),
            seen: vec![vec![0; words]; table.len()],
            duplicate: None,
            report: AggregateReport::default(),
        }
    }

    pub fn add(&mut self, record: &ActivityRecord) {
        let Some(a) = self.table.position(&record.antenna_id) else {
            self.report.unknown_antenna += 1;
            return;
        };
        let Some(w) = self.axis.index_of(record.window_start) else {
            self.report.outside_period += 1;
            return;
        };
        self.add_indexed(a, w, &record.counts);
    }

    /// Adds counts for antenna number `antenna` (table order) at window `w`.
    pub fn add_indexed(&mut self, antenna: usize, w: usize, counts: &PerType<u64>) {
        let (word, bit) = (w / 64, 1u64 << (w % 64));
        if self.seen[antenna][word] & bit != 0 {
            if self.duplicate.is_none() {
                self.duplicate = Some((
                    self.table.entries[antenna].antenna_id.clone(),
                    self.axis.time_at(w),
                ));
            }
            return;
        }
        self.seen[antenna][word] |= bit;
        self.report.accepted += 1;
        self.cells[self.antenna_cell[antenna]].add(w, counts);
        if let Some(d) = self.table.entries[antenna].district {
            self.districts[d].add(w, counts);
        }
        self.city.add(w, counts);
    }

    /// Elementwise sum of two shards. Overlapping keys are duplicates.
    pub fn merge(mut self, other: Aggregator<'a>) -> Self {
        for (ant, (mine, theirs)) in self.seen.iter_mut().zip(&other.seen).enumerate() {
            for (word, (a, b)) in mine.iter_mut().zip(theirs).enumerate() {
                let overlap = *a & *b;
                if overlap != 0 && self.duplicate.is_none() {
                    let w = word * 64 + overlap.trailing_zeros() as usize;
                    self.duplicate = Some((
                        self.table.entries[ant].antenna_id.clone(),
                        self.axis.time_at(w),
                    ));
                }
                *a |= b;
            }
        }
        if self.duplicate.is_none() {
            self.duplicate = other.duplicate.clone();
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.merge(b);
        }
        for (a, b) in self.districts.iter_mut().zip(&other.districts) {
            a.merge(b);
        }
        self.city.merge(&other.city);
        self.report.accepted += other.report.accepted;
        self.report.unknown_antenna += other.report.unknown_antenna;
        self.report.outside_period += other.report.outside_period;
        self
    }

    pub fn report(&self) -> &AggregateReport {
        &self.report
    }

    /// Finishes the fold; fails if any `(antenna, window)` key was seen twice.
    pub fn finish(self) -> Result<Aggregation> {
        if let Some((antenna_id, window_start)) = self.duplicate {
            return Err(Error::DuplicateRecord {
                antenna_id,
                window_start,
                line: None,
            });
        }
        let districts = self
            .districts
            .into_iter()
            .zip(self.table.entries.iter().fold(
                vec![false; self.table.district_ids.len()],
                |mut used, e| {
                    if let Some(d) = e.district {
                        used[d] = true;
                    }
                    used
                },
            ))
            .filter_map(|(s, used)| used.then_some(s))
            .collect();
        Ok(Aggregation {
            cells: self.cell_keys.into_iter().zip(self.cells).collect(),
            districts,
            city: self.city,
            report: self.report,
        })
    }
}

/// Folds a record stream into region series.
pub fn aggregate<I>(records: I, table: &AssignmentTable, config: &CityConfig) -> Result<Aggregation>
where
    I: IntoIterator,
    I::Item: std::borrow::Borrow<ActivityRecord>,
{
    let mut agg = Aggregator::new(table, config);
    for r in records {
        agg.add(std::borrow::Borrow::borrow(&r));
    }
    agg.finish()
}
