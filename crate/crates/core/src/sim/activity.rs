use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activity taxonomy with a stable 0..=7 integer encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivityClass {
    LieDown = 0,
    Fall = 1,
    Walk = 2,
    Pickup = 3,
    Run = 4,
    SitDown = 5,
    StandUp = 6,
    /// Person present / absent state.
    Presence = 7,
}

impl ActivityClass {
    pub const COUNT: usize = 8;

    pub const ALL: [ActivityClass; 8] = [
        ActivityClass::LieDown,
        ActivityClass::Fall,
        ActivityClass::Walk,
        ActivityClass::Pickup,
        ActivityClass::Run,
        ActivityClass::SitDown,
        ActivityClass::StandUp,
        ActivityClass::Presence,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL.get(index).copied().ok_or(Error::InvalidLabel {
            label: index,
            classes: Self::COUNT,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivityClass::LieDown => "lie-down",
            ActivityClass::Fall => "fall",
            ActivityClass::Walk => "walk",
            ActivityClass::Pickup => "pickup",
            ActivityClass::Run => "run",
            ActivityClass::SitDown => "sit-down",
            ActivityClass::StandUp => "stand-up",
            ActivityClass::Presence => "presence",
        }
    }
}

impl fmt::Display for ActivityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivityClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown activity '{s}'")))
    }
}

impl TryFrom<u8> for ActivityClass {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Self::from_index(v as usize)
    }
}
