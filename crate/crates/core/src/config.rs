//! Per-dataset hyper-parameter presets.

use serde::{Deserialize, Serialize};

use crate::cpl::{CplParams, FilterMode, DEFAULT_TAU};
use crate::encoding::EncodingParams;
use crate::error::{DawnError, Result};
use crate::losses::LossWeights;

/// Version stamped into every JSON config and report.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub encoding: EncodingParams,
    pub cpl: CplParams,
    /// Point-matching radius for detection scores, in pixels.
    pub match_radius: f64,
    pub magnification: String,
    #[serde(default)]
    pub loss_weights: LossWeights,
}

/// `(name, r1, r2, sigma, theta, d, magnification)`
const PRESETS: [(&str, f64, f64, f64, f64, f64, &str); 4] = [
    ("TNBC", 11.0, 22.0, 2.75, 0.2, 25.0, "40x"),
    ("CryoNuSeg", 11.0, 22.0, 2.75, 0.2, 25.0, "40x"),
    ("Lizard", 8.0, 16.0, 2.0, 0.2, 25.0, "20x"),
    ("ConSeP", 11.0, 22.0, 5.0, 0.5, 25.0, "40x"),
];

impl DatasetConfig {
    pub fn preset_names() -> Vec<&'static str> {
        PRESETS.iter().map(|p| p.0).collect()
    }

    /// Looks up a preset by case-insensitive name.
    pub fn preset(name: &str) -> Result<Self> {
        let &(name, r1, r2, sigma, theta, d, mag) = PRESETS
            .iter()
            .find(|p| p.0.eq_ignore_ascii_case(name))
            .ok_or_else(|| DawnError::UnknownDataset(name.to_string()))?;
        Ok(DatasetConfig {
            name: name.to_string(),
            encoding: EncodingParams { r1, r2, sigma, dataset: Some(name.to_string()) },
            cpl: CplParams { theta, d, tau: DEFAULT_TAU, filter_mode: FilterMode::Pixel },
            match_radius: r1,
            magnification: mag.to_string(),
            loss_weights: LossWeights::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(DawnError::InvalidParams("dataset name must not be empty".into()));
        }
        self.encoding.validate()?;
        self.cpl.validate()?;
        self.loss_weights.validate()?;
        if self.match_radius.is_nan() || self.match_radius <= 0.0 {
            return Err(DawnError::InvalidParams(format!("match_radius must be positive, got {}", self.match_radius)));
        }
        Ok(())
    }
}

/// A dataset given either by preset name or spelled out in full.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetRef {
    Preset(String),
    Inline(DatasetConfig),
}

impl DatasetRef {
    pub fn resolve(&self) -> Result<DatasetConfig> {
        let cfg = match self {
            DatasetRef::Preset(name) => DatasetConfig::preset(name)?,
            DatasetRef::Inline(cfg) => cfg.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_case_insensitively() {
        assert_eq!(DatasetConfig::preset("tnbc").unwrap().name, "TNBC");
        assert!(matches!(DatasetConfig::preset("MoNuSeg"), Err(DawnError::UnknownDataset(_))));
        for name in DatasetConfig::preset_names() {
            DatasetConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn dataset_ref_parses_both_forms() {
        let r: DatasetRef = serde_json::from_str("\"Lizard\"").unwrap();
        assert_eq!(r.resolve().unwrap().encoding.r1, 8.0);
        let full = serde_json::to_string(&DatasetConfig::preset("ConSeP").unwrap()).unwrap();
        let r: DatasetRef = serde_json::from_str(&full).unwrap();
        assert_eq!(r.resolve().unwrap().cpl.theta, 0.5);
    }
}
