//! Run configuration: one JSON document carrying every stage's parameters.
//! Unknown keys are rejected; each stage writes the fully resolved config
//! beside its outputs for provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bags::{CapPolicy, DEFAULT_INSTANCE_CAP};
use crate::ecg::{EcgViewConfig, DEFAULT_QUALITY_THRESHOLD};
use crate::error::Result;
use crate::mil::TrainConfig;
use crate::weekly::MissingUnit;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub patients: usize,
    pub weeks: usize,
    pub pss_noise_sd: f64,
    pub adherence: Option<f64>,
    pub ecg_minutes: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            patients: 40,
            weeks: 26,
            pss_noise_sd: 3.0,
            adherence: None,
            ecg_minutes: 30.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EcgStageConfig {
    pub quality_threshold: f64,
    pub views: EcgViewConfig,
}

impl Default for EcgStageConfig {
    fn default() -> Self {
        EcgStageConfig {
            quality_threshold: DEFAULT_QUALITY_THRESHOLD,
            views: EcgViewConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WatchStageConfig {
    pub missing_unit: MissingUnit,
}

impl Default for WatchStageConfig {
    fn default() -> Self {
        WatchStageConfig {
            missing_unit: MissingUnit::Cell,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BagStageConfig {
    pub cap: usize,
    pub cap_policy: CapPolicy,
}

impl Default for BagStageConfig {
    fn default() -> Self {
        BagStageConfig {
            cap: DEFAULT_INSTANCE_CAP,
            cap_policy: CapPolicy::Uniform,
        }
    }
}

/// The whole run's parameters. The single `seed` governs every stage via
/// documented derivation (hash of seed + stage name + qualifiers).
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker cap for parallel stages; None uses all cores. Outputs do not
    /// depend on this value.
    pub jobs: Option<usize>,
    pub simulate: SimulateConfig,
    pub ecg: EcgStageConfig,
    pub watch: WatchStageConfig,
    pub bags: BagStageConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path)?;
        let cfg: RunConfig = serde_json::from_slice(&text)?;
        Ok(cfg)
    }

    /// Writes the fully resolved config as `run.json` in an output
    /// directory, the provenance record every stage leaves behind.
    pub fn write_provenance(&self, out_dir: &Path, stage: &str) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        #[derive(Serialize)]
        struct Provenance<'a> {
            stage: &'a str,
            config: &'a RunConfig,
        }
        std::fs::write(
            out_dir.join("run.json"),
            serde_json::to_vec_pretty(&Provenance {
                stage,
                config: self,
            })?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_serialize_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = RunConfig::default();
        std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.seed, 0);
        assert_eq!(back.bags.cap, 512);
        assert_eq!(back.train.lr0, 5e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, br#"{"seed": 3, "not_a_key": true}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
        let nested = dir.path().join("nested.json");
        std::fs::write(&nested, br#"{"train": {"lr99": 1.0}}"#).unwrap();
        assert!(RunConfig::load(&nested).is_err());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, br#"{"seed": 9, "simulate": {"patients": 6}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.simulate.patients, 6);
        assert_eq!(cfg.simulate.weeks, 26);
    }
}
