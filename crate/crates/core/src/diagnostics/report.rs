use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::Precision;

pub const CSV_HEADER: &str = "checkpoint_id,delta_ti,cosine_distance,procrustes_error,principal_angle_max";

/// Consistency measurements for one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub checkpoint_id: String,
    pub delta_ti: f64,
    pub cosine_distance: f64,
    pub procrustes_error: f64,
    /// Radians.
    pub principal_angle_max: f64,
    pub principal_angles_full: Vec<f64>,
    pub precision_used: Precision,
}

impl DiagnosticsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One CSV row in [`CSV_HEADER`] column order. Commas and quotes in the id
    /// are escaped.
    pub fn csv_row(&self) -> String {
        let id = if self.checkpoint_id.contains([',', '"', '\n']) {
            format!("\"{}\"", self.checkpoint_id.replace('"', "\"\""))
        } else {
            self.checkpoint_id.clone()
        };
        format!(
            "{id},{:e},{:e},{:e},{:e}",
            self.delta_ti, self.cosine_distance, self.procrustes_error, self.principal_angle_max
        )
    }

    /// Appends a row, writing the header first when the file is new or empty.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if f.metadata()?.len() == 0 {
            writeln!(f, "{CSV_HEADER}")?;
        }
        writeln!(f, "{}", self.csv_row())?;
        Ok(())
    }

    /// Largest of the four scalar metrics.
    pub fn max_metric(&self) -> f64 {
        self.delta_ti.max(self.cosine_distance).max(self.procrustes_error).max(self.principal_angle_max)
    }
}
