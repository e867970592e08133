//! Parsing and validation of `antennas.csv` and `activity.csv` streams.
//!
//! Malformed rows are rejected with their line number and reported; they do
//! not abort ingest. Duplicate `(antenna_id, window_start)` keys are the one
//! fatal data error, raised once the whole stream has been read.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{self, Read, Write};

use chrono::{DateTime, Utc};
use csv::{ByteRecord, ReaderBuilder};
use serde::{Deserialize, Serialize};

use crate::activity::{ActivityType, PerType};
use crate::config::BBox;
use crate::error::{Error, Result};
use crate::time::{format_utc, is_window_aligned, WINDOW_SECS};

pub const ANTENNA_HEADER: [&str; 3] = ["antenna_id", "lat", "lon"];
pub const ACTIVITY_HEADER: [&str; 7] = [
    "antenna_id",
    "window_start",
    "calls",
    "sms",
    "data_down",
    "data_up",
    "data_requests",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Antenna {
    pub antenna_id: String,
    pub lat: f64,
    pub lon: f64,
}

/// One antenna, one 15-minute window, five counters (ordinal order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivityRecord {
    pub antenna_id: String,
    pub window_start: DateTime<Utc>,
    pub counts: PerType<u64>,
}

impl ActivityRecord {
    pub fn count(&self, t: ActivityType) -> u64 {
        self.counts[t.ordinal()]
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let c = &self.counts;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            self.antenna_id,
            format_utc(self.window_start),
            c[0],
            c[1],
            c[2],
            c[3],
            c[4]
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Rejection {
    Malformed(String),
    BadCoordinate(String),
    OutOfBbox,
    BadTimestamp(String),
    UnalignedWindow,
    NegativeCounter(String),
    BadCounter(String),
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::Malformed(m) => write!(f, "malformed row: {m}"),
            Rejection::BadCoordinate(c) => write!(f, "non-numeric coordinate `{c}`"),
            Rejection::OutOfBbox => f.write_str("outside city bbox"),
            Rejection::BadTimestamp(t) => write!(f, "bad timestamp `{t}`"),
            Rejection::UnalignedWindow => f.write_str("unaligned window"),
            Rejection::NegativeCounter(c) => write!(f, "negative counter `{c}`"),
            Rejection::BadCounter(c) => write!(f, "non-numeric counter `{c}`"),
        }
    }
}

/// A rejected data row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    pub line: u64,
    pub reason: Rejection,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Debug, Clone, Default)]
pub struct AntennaParse {
    pub antennas: Vec<Antenna>,
    pub rejected: Vec<RowError>,
}

fn check_header(headers: &ByteRecord, expected: &[&str], file: &str) -> Result<()> {
    let ok = headers.len() == expected.len()
        && headers.iter().zip(expected).enumerate().all(|(i, (h, e))| {
            let h = std::str::from_utf8(h).unwrap_or("");
            // tolerate a UTF-8 BOM on the first field
            let h = if i == 0 { h.trim_start_matches('\u{feff}') } else { h };
            h.trim() == *e
        });
    if ok {
        Ok(())
    } else {
        Err(Error::MissingHeader {
            file: file.to_string(),
            expected: expected.join(","),
        })
    }
}

fn field(rec: &ByteRecord, i: usize) -> Result<&str, Rejection> {
    let raw = rec.get(i).unwrap_or_default();
    std::str::from_utf8(raw)
        .map(str::trim)
        .map_err(|_| Rejection::Malformed("invalid UTF-8".into()))
}

/// Parses a header-bearing `antenna_id,lat,lon` stream. With a bbox, antennas
/// outside it are rejected with [`Rejection::OutOfBbox`].
pub fn parse_antennas<R: Read>(reader: R, bbox: Option<&BBox>) -> Result<AntennaParse> {
    let mut rdr = ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.byte_headers()?.clone();
    check_header(&headers, &ANTENNA_HEADER, "antennas.csv")?;

    let mut out = AntennaParse::default();
    let mut seen: HashSet<String> = HashSet::new();
    let mut rec = ByteRecord::new();
    while rdr.read_byte_record(&mut rec)? {
        let line = rec.position().map_or(0, |p| p.line());
        match parse_antenna_row(&rec, bbox) {
            Ok(antenna) => {
                if !seen.insert(antenna.antenna_id.clone()) {
                    return Err(Error::DuplicateAntenna {
                        antenna_id: antenna.antenna_id,
                        line,
                    });
                }
                out.antennas.push(antenna);
            }
            Err(reason) => out.rejected.push(RowError { line, reason }),
        }
    }
    Ok(out)
}

fn parse_antenna_row(rec: &ByteRecord, bbox: Option<&BBox>) -> Result<Antenna, Rejection> {
    if rec.len() != ANTENNA_HEADER.len() {
        return Err(Rejection::Malformed(format!(
            "expected 3 fields, found {}",
            rec.len()
        )));
    }
    let id = field(rec, 0)?;
    if id.is_empty() {
        return Err(Rejection::Malformed("empty antenna_id".into()));
    }
    let coord = |i: usize| -> Result<f64, Rejection> {
        let s = field(rec, i)?;
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Rejection::BadCoordinate(s.to_string()))
    };
    let (lat, lon) = (coord(1)?, coord(2)?);
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(Rejection::BadCoordinate(format!("{lat},{lon}")));
    }
    if let Some(b) = bbox {
        if !b.contains(lat, lon) {
            return Err(Rejection::OutOfBbox);
        }
    }
    Ok(Antenna {
        antenna_id: id.to_string(),
        lat,
        lon,
    })
}

pub fn write_antennas<W: Write>(w: &mut W, antennas: &[Antenna]) -> io::Result<()> {
    writeln!(w, "{}", ANTENNA_HEADER.join(","))?;
    for a in antennas {
        writeln!(w, "{},{},{}", a.antenna_id, a.lat, a.lon)?;
    }
    Ok(())
}

/// One parsed data row.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedRow {
    Record { line: u64, record: ActivityRecord },
    Rejected(RowError),
}

/// Streaming reader over an activity CSV. Holds one row buffer at a time.
pub struct ActivityReader<R: Read> {
    rdr: csv::Reader<R>,
    rec: ByteRecord,
}

impl<R: Read> ActivityReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut rdr = ReaderBuilder::new()
            .flexible(true)
            .buffer_capacity(1 << 16)
            .from_reader(reader);
        let headers = rdr.byte_headers()?.clone();
        check_header(&headers, &ACTIVITY_HEADER, "activity.csv")?;
        Ok(ActivityReader {
            rdr,
            rec: ByteRecord::new(),
        })
    }

    pub fn next_row(&mut self) -> Result<Option<ParsedRow>> {
        if !self.rdr.read_byte_record(&mut self.rec)? {
            return Ok(None);
        }
        let line = self.rec.position().map_or(0, |p| p.line());
        Ok(Some(match parse_activity_row(&self.rec) {
            Ok(record) => ParsedRow::Record { line, record },
            Err(reason) => ParsedRow::Rejected(RowError { line, reason }),
        }))
    }
}

impl<R: Read> Iterator for ActivityReader<R> {
    type Item = Result<ParsedRow>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_row().transpose()
    }
}

/// Opens an activity stream for row-by-row parsing; see [`ActivityReader`].
pub fn parse_activity<R: Read>(reader: R) -> Result<ActivityReader<R>> {
    ActivityReader::new(reader)
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .ok()
        .filter(|dt| dt.offset().local_minus_utc() == 0)
        .map(|dt| dt.with_timezone(&Utc))
}

fn parse_activity_row(rec: &ByteRecord) -> Result<ActivityRecord, Rejection> {
    if rec.len() != ACTIVITY_HEADER.len() {
        return Err(Rejection::Malformed(format!(
            "expected 7 fields, found {}",
            rec.len()
        )));
    }
    let id = field(rec, 0)?;
    if id.is_empty() {
        return Err(Rejection::Malformed("empty antenna_id".into()));
    }
    let ts_raw = field(rec, 1)?;
    let ts = parse_timestamp(ts_raw).ok_or_else(|| Rejection::BadTimestamp(ts_raw.into()))?;
    if !is_window_aligned(ts) {
        return Err(Rejection::UnalignedWindow);
    }
    let mut counts = [0u64; ActivityType::COUNT];
    for (k, slot) in counts.iter_mut().enumerate() {
        let s = field(rec, 2 + k)?;
        *slot = match s.parse::<u64>() {
            Ok(v) => v,
            Err(_) if s.starts_with('-') && s[1..].parse::<u64>().is_ok() => {
                return Err(Rejection::NegativeCounter(s.to_string()))
            }
            Err(_) => return Err(Rejection::BadCounter(s.to_string())),
        };
    }
    Ok(ActivityRecord {
        antenna_id: id.to_string(),
        window_start: ts,
        counts,
    })
}

pub fn write_activity_header<W: Write>(w: &mut W) -> io::Result<()> {
    writeln!(w, "{}", ACTIVITY_HEADER.join(","))
}

/// Tracks seen `(antenna_id, window)` keys with one bit per window.
#[derive(Debug, Default)]
pub struct DuplicateIndex {
    seen: HashMap<String, BTreeMap<i64, u64>>,
    first_duplicate: Option<(String, DateTime<Utc>, Option<u64>)>,
    duplicates: u64,
}

impl DuplicateIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a key; returns `false` if it was already present.
    pub fn insert(&mut self, antenna_id: &str, window_start: DateTime<Utc>, line: Option<u64>) -> bool {
        let w = window_start.timestamp().div_euclid(WINDOW_SECS);
        let blocks = match self.seen.get_mut(antenna_id) {
            Some(b) => b,
            None => self.seen.entry(antenna_id.to_string()).or_default(),
        };
        let bits = blocks.entry(w.div_euclid(64)).or_insert(0);
        let mask = 1u64 << w.rem_euclid(64);
        if *bits & mask != 0 {
            self.duplicates += 1;
            if self.first_duplicate.is_none() {
                self.first_duplicate = Some((antenna_id.to_string(), window_start, line));
            }
            return false;
        }
        *bits |= mask;
        true
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    /// Fails with the first duplicate seen, if any.
    pub fn finish(self) -> Result<()> {
        match self.first_duplicate {
            Some((antenna_id, window_start, line)) => Err(Error::DuplicateRecord {
                antenna_id,
                window_start,
                line,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub data_rows: u64,
    pub accepted: u64,
    pub rejected: Vec<RowError>,
}

/// Parses a whole activity stream, handing every accepted record to `sink`
/// in stream order. Duplicates abort after the stream is exhausted.
pub fn ingest_activity<R, F>(reader: R, mut sink: F) -> Result<IngestReport>
where
    R: Read,
    F: FnMut(ActivityRecord),
{
    let mut rows = ActivityReader::new(reader)?;
    let mut dups = DuplicateIndex::new();
    let mut report = IngestReport::default();
    while let Some(row) = rows.next_row()? {
        report.data_rows += 1;
        match row {
            ParsedRow::Record { line, record } => {
                dups.insert(&record.antenna_id, record.window_start, Some(line));
                report.accepted += 1;
                sink(record);
            }
            ParsedRow::Rejected(err) => {
                if report.rejected.len() < 20 {
                    log::warn!("activity.csv {err}");
                }
                report.rejected.push(err);
            }
        }
    }
    dups.finish()?;
    Ok(report)
}
