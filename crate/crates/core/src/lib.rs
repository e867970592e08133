//! Batch analytics for aggregated mobile-network activity.
//!
//! The pipeline turns per-antenna, per-15-minute activity counters into
//! region series (grid cells, districts, whole city), typical-week profiles,
//! residual-based event reports, functional clusters of grid cells and
//! density maps, and persists them as an immutable on-disk store.

pub mod activity;
pub mod clusters;
pub mod config;
pub mod density;
pub mod error;
pub mod events;
pub mod ingest;
pub mod metrics;
pub mod profiles;
pub mod spatial;
pub mod store;
pub mod synth;
pub mod time;

pub use activity::ActivityType;
pub use config::{BBox, CityConfig};
pub use error::{Error, Result};
