//! Pseudo-inverse tied token interface.
//!
//! A [`PitHead`] builds its embedding and unembedding from one orthonormal
//! token memory `z` (`V×d`) and an SPD metric `T = L·Lᵀ`:
//! `E = z·T⁻¹` and `W_out = T·zᵀ`, so `W_out·E = I_d` holds for every
//! parameter value. [`TtHead`] is the transpose-tied baseline.

mod head;
mod memory;
mod transform;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use head::{HeadVars, PitHead, TeacherOptions, TokenHead, TtHead};
pub use memory::{canonicalize, retract, retract_matrix, SharedTokenMemory, MEMORY_TOL, RETRACTION_RIDGE};
pub use transform::{strict_lower_index, strict_lower_len, SpdTransform, LOG_DIAG_CLAMP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Tt,
    Pit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Teacher,
    #[default]
    Scratch,
}

impl HeadMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::Tt => "tt",
            HeadMode::Pit => "pit",
        }
    }
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Teacher => "teacher",
            InitMode::Scratch => "scratch",
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "tt" => Ok(HeadMode::Tt),
            "pit" => Ok(HeadMode::Pit),
            _ => Err(Error::Config(format!("unknown head mode {s:?} (expected tt or pit)"))),
        }
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "teacher" => Ok(InitMode::Teacher),
            "scratch" => Ok(InitMode::Scratch),
            _ => Err(Error::Config(format!("unknown init mode {s:?} (expected teacher or scratch)"))),
        }
    }
}
