use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Camera platform of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Aerial,
    Ground,
}

impl View {
    pub const ALL: [View; 2] = [View::Aerial, View::Ground];

    /// Row of the view-embedding table and class index of the view head.
    pub fn index(self) -> usize {
        match self {
            View::Aerial => 0,
            View::Ground => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<View, Error> {
        match i {
            0 => Ok(View::Aerial),
            1 => Ok(View::Ground),
            _ => Err(Error::Domain(format!("unknown view label {i}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            View::Aerial => "aerial",
            View::Ground => "ground",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "aerial" | "a" => Ok(View::Aerial),
            "ground" | "g" => Ok(View::Ground),
            other => Err(Error::Domain(format!("unknown view label {other:?}"))),
        }
    }
}
