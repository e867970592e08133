//! City configuration (`city.json`).

use std::path::Path;

use chrono::{DateTime, NaiveDate, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CELL_SIZE_M: f64 = 500.0;

/// Geographic bounding box in WGS84 degrees. Serialized as
/// `[lat_min, lon_min, lat_max, lon_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub lat_min: f64,
    pub lon_min: f64,
    pub lat_max: f64,
    pub lon_max: f64,
}

impl BBox {
    pub fn new(lat_min: f64, lon_min: f64, lat_max: f64, lon_max: f64) -> Self {
        BBox {
            lat_min,
            lon_min,
            lat_max,
            lon_max,
        }
    }

    /// Closed-interval containment.
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.lat_min && lat <= self.lat_max && lon >= self.lon_min && lon <= self.lon_max
    }

    pub fn mid_lat(&self) -> f64 {
        0.5 * (self.lat_min + self.lat_max)
    }
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.lat_min, b.lon_min, b.lat_max, b.lon_max]
    }
}

fn default_cell_size() -> f64 {
    DEFAULT_CELL_SIZE_M
}

/// Static description of one city: where, at what resolution, and when.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityConfig {
    pub city_id: String,
    pub bbox: BBox,
    #[serde(default = "default_cell_size")]
    pub cell_size_m: f64,
    /// First UTC date of the half-open period.
    pub period_start: NaiveDate,
    /// UTC date after the last day of the period.
    pub period_end: NaiveDate,
    pub timezone: Tz,
}

impl CityConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: CityConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.city_id.is_empty()
            || !self
                .city_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return bad(format!(
                "city_id `{}` must be non-empty and use only [A-Za-z0-9_-]",
                self.city_id
            ));
        }
        let b = &self.bbox;
        if ![b.lat_min, b.lat_max, b.lon_min, b.lon_max]
            .iter()
            .all(|v| v.is_finite())
        {
            return bad("bbox has non-finite coordinates".into());
        }
        if !(-90.0..=90.0).contains(&b.lat_min) || !(-90.0..=90.0).contains(&b.lat_max) {
            return bad("bbox latitude outside [-90, 90]".into());
        }
        if !(-180.0..=180.0).contains(&b.lon_min) || !(-180.0..=180.0).contains(&b.lon_max) {
            return bad("bbox longitude outside [-180, 180]".into());
        }
        if b.lat_min >= b.lat_max || b.lon_min >= b.lon_max {
            return Err(Error::DegenerateBbox(format!("{:?}", <[f64; 4]>::from(*b))));
        }
        if !(self.cell_size_m.is_finite() && self.cell_size_m > 0.0) {
            return bad(format!("cell_size_m must be > 0, got {}", self.cell_size_m));
        }
        if (self.period_end - self.period_start).num_days() < 7 {
            return bad(format!(
                "period {}..{} is shorter than one week",
                self.period_start, self.period_end
            ));
        }
        Ok(())
    }

    pub fn period_start_utc(&self) -> DateTime<Utc> {
        self.period_start.and_hms_opt(0, 0, 0).unwrap().and_utc()
    }

    pub fn period_end_utc(&self) -> DateTime<Utc> {
        self.period_end.and_hms_opt(0, 0, 0).unwrap().and_utc()
    }
}
