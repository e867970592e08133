//! The five activity measures reported per antenna and window.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Activity measure. The declaration order is the ordinal order used for
/// feature concatenation and ratio maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActivityType {
    Calls,
    Sms,
    DataDown,
    DataUp,
    DataRequests,
}

impl ActivityType {
    pub const ALL: [ActivityType; 5] = [
        ActivityType::Calls,
        ActivityType::Sms,
        ActivityType::DataDown,
        ActivityType::DataUp,
        ActivityType::DataRequests,
    ];

    pub const COUNT: usize = 5;

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActivityType::Calls => "CALLS",
            ActivityType::Sms => "SMS",
            ActivityType::DataDown => "DATA_DOWN",
            ActivityType::DataUp => "DATA_UP",
            ActivityType::DataRequests => "DATA_REQUESTS",
        }
    }

    /// Parses a comma-separated list such as `CALLS,SMS`.
    pub fn parse_list(s: &str) -> Result<Vec<ActivityType>, Error> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for ActivityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActivityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActivityType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownActivityType(s.to_string()))
    }
}

/// One value per activity type, indexed by ordinal.
pub type PerType<T> = [T; ActivityType::COUNT];
