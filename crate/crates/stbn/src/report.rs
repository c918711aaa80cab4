//! JSON reports.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stbn_core::metrics::QualityMetrics;

use crate::error::{io_err, Result};

/// Quality of a denoised clip against its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub estimate: String,
    pub reference: String,
    #[serde(flatten)]
    pub metrics: QualityMetrics,
    /// The run configuration that produced the estimate, if known.
    pub config: serde_json::Value,
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}
