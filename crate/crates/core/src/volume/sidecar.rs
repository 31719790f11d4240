use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Acquisition metadata stored next to each NIfTI file as `<stem>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub series: String,
    pub echo_times_ms: Vec<f64>,
    pub flip_angle_deg: f64,
    pub tr_ms: f64,
    /// Optional scanner-reported slice orientation ("axial", "sagittal", "coronal").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<String>,
}

impl Sidecar {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("sidecar serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
