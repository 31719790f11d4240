//! Pipeline configuration: one TOML file plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anomaly::AnomalyConfig;
use crate::assembly::AssemblyConfig;
use crate::error::{Error, Result};
use crate::landmarks::{load_bank, Atlas, LandmarkConfig};
use crate::phantom::atlas::{make_atlas_bank_with, AtlasBankConfig};
use crate::quantify::QuantConfig;
use crate::swap::SwapConfig;

/// Where the landmark atlases come from. A directory wins over the synthetic bank.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtlasSource {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub synthetic: AtlasBankConfig,
}

impl AtlasSource {
    pub fn load(&self) -> Result<Vec<Atlas>> {
        match &self.dir {
            Some(dir) => load_bank(dir),
            None => make_atlas_bank_with(&self.synthetic),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// Keep `tmp/` after a successful run.
    pub keep_tmp: bool,
    /// Fit multiecho rows on the rayon pool.
    pub parallel_fit: bool,
    /// Multiecho voxels below this fraction of the 99th first-echo magnitude are not fitted.
    pub signal_fraction: f64,
    pub plots: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { keep_tmp: false, parallel_fit: true, signal_fraction: 0.1, plots: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunOptions,
    pub assembly: AssemblyConfig,
    pub swap: SwapConfig,
    pub anomaly: AnomalyConfig,
    pub landmarks: LandmarkConfig,
    pub atlas_bank: AtlasSource,
    pub quant: QuantConfig,
}

/// Keys that may be set although the default configuration leaves them out.
const OPTIONAL_KEYS: [&str; 1] = ["atlas_bank.dir"];

impl PipelineConfig {
    /// Defaults, then the file (if any), then each `a.b.c=value` override in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match file {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(Self::default()).expect("default configuration serializes");
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        merge(&mut root, toml::Value::Table(file), "")?;
        for o in overrides {
            set_dotted(&mut root, o)?;
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.message().to_string()))?;
        cfg.quant.spectrum.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }
}

fn unknown(key: &str) -> Error {
    Error::InvalidConfig(format!("unknown configuration key `{key}`"))
}

fn merge(base: &mut toml::Value, overlay: toml::Value, prefix: &str) -> Result<()> {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None if OPTIONAL_KEYS.contains(&path.as_str()) => {
                        b.insert(k, v);
                    }
                    None => return Err(unknown(&path)),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as a TOML value,
/// falling back to a bare string.
pub fn set_dotted(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` is not of the form key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut overlay = value;
    for key in path.rsplit('.') {
        if key.is_empty() {
            return Err(unknown(path));
        }
        let mut t = toml::Table::new();
        t.insert(key.to_string(), overlay);
        overlay = toml::Value::Table(t);
    }
    merge(root, overlay, "")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn file_then_overrides() {
        let text = "[landmarks]\natlas_count = 11\n[run]\nkeep_tmp = true\n";
        let o = vec!["landmarks.atlas_count=9".to_string(), "quant.r2star_max = 400".into(), "atlas_bank.dir=/banks/a".into()];
        let cfg = PipelineConfig::from_toml(text, &o).unwrap();
        assert_eq!(cfg.landmarks.atlas_count, 9);
        assert!(cfg.run.keep_tmp);
        assert_eq!(cfg.quant.r2star_max, 400.0);
        assert_eq!(cfg.atlas_bank.dir, Some(PathBuf::from("/banks/a")));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(PipelineConfig::from_toml("[landmarks]\natlas_cnt = 3\n", &[]).is_err());
        assert!(PipelineConfig::from_toml("", &["nope.x=1".into()]).is_err());
        assert!(PipelineConfig::from_toml("", &["landmarks.atlas_count=many".into()]).is_err());
        assert!(PipelineConfig::from_toml("", &["landmarks".into()]).is_err());
    }
}
