use std::path::PathBuf;

use chrono::{DateTime, Utc};
use thiserror::Error;

/// Errors raised by the analytics pipeline.
///
/// Row-level problems in input files are not errors: they are collected in
/// reports (see [`crate::ingest::RowError`]) and ingest continues.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid city config: {0}")]
    InvalidConfig(String),

    #[error("missing or malformed header in {file}: expected `{expected}`")]
    MissingHeader { file: String, expected: String },

    #[error("duplicate antenna id {antenna_id} (line {line})")]
    DuplicateAntenna { antenna_id: String, line: u64 },

    #[error("duplicate activity record for antenna {antenna_id} at {window_start}{}", .line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    DuplicateRecord {
        antenna_id: String,
        window_start: DateTime<Utc>,
        line: Option<u64>,
    },

    #[error("invalid district {district_id}: {reason}")]
    InvalidDistrict { district_id: String, reason: String },

    #[error("degenerate bounding box: {0}")]
    DegenerateBbox(String),

    #[error("unknown resolution `{0}` (expected 15min, hour, day or week)")]
    UnknownResolution(String),

    #[error("unknown activity type `{0}`")]
    UnknownActivityType(String),

    #[error("invalid week id `{0}` (expected YYYY-Www)")]
    InvalidWeekId(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty period")]
    EmptyPeriod,

    #[error("period {start}..{end} is not within the city period")]
    PeriodOutOfRange {
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    },

    #[error("clustering: {0}")]
    Clustering(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("store: {0}")]
    Store(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
