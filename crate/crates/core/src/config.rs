//! Resolved run configuration: one JSON document bundling every stage's
//! settings. Unknown keys are rejected, and each command writes the resolved
//! form next to its outputs so a run can be reproduced from the artifact
//! alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::FusionMode;
use crate::error::{Error, Result};
use crate::features::FeatureChannel;
use crate::gcn::ClassifierTrainConfig;
use crate::grader::TrainConfig;
use crate::graph::EdgeMode;
use crate::phantom::{CohortCounts, PhantomConfig};
use crate::rng::derive_seed;
use crate::unet::UnetArch;

/// Patch-grid geometry at grading resolution.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridParams {
    pub patch_dims: (usize, usize, usize),
    pub k_per_axis: (usize, usize, usize),
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            patch_dims: (12, 14, 12),
            k_per_axis: (3, 3, 3),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathOverrides {
    pub out_dir: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub cohort: CohortCounts,
    pub grid: GridParams,
    pub arch: UnetArch,
    pub train: TrainConfig,
    pub classifier: ClassifierTrainConfig,
    pub channels: Vec<FeatureChannel>,
    pub edge_mode: EdgeMode,
    pub fusion_mode: FusionMode,
    pub repetitions: usize,
    pub paths: PathOverrides,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            phantom: PhantomConfig::default(),
            cohort: CohortCounts::default(),
            grid: GridParams::default(),
            arch: UnetArch::default(),
            train: TrainConfig::default(),
            classifier: ClassifierTrainConfig::default(),
            channels: vec![FeatureChannel::Dg, FeatureChannel::Age],
            edge_mode: EdgeMode::VolumeDiff,
            fusion_mode: FusionMode::Weighted,
            repetitions: 10,
            paths: PathOverrides::default(),
        }
    }
}

impl RunConfig {
    /// Load from JSON (unknown keys rejected) and resolve derived seeds.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::config(format!("bad run config: {e}")))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => {
                let mut cfg = RunConfig::default();
                cfg.resolve();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    /// Derive every stage seed from the root seed. Called on load, and again
    /// after a CLI seed override.
    pub fn resolve(&mut self) {
        self.phantom.seed = derive_seed(self.seed, "phantom-cohort", 0);
        self.train.seed = derive_seed(self.seed, "ensemble", 0);
        self.classifier.seed = derive_seed(self.seed, "classifier", 0);
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.train.validate()?;
        self.classifier.validate()?;
        if self.channels.is_empty() {
            return Err(Error::config("at least one feature channel required"));
        }
        let mut seen = Vec::new();
        for c in &self.channels {
            if seen.contains(c) {
                return Err(Error::config("duplicate feature channel"));
            }
            seen.push(*c);
        }
        if self.repetitions == 0 {
            return Err(Error::config("repetitions must be positive"));
        }
        for (d, p, k) in [
            (self.grading_dims().0, self.grid.patch_dims.0, self.grid.k_per_axis.0),
            (self.grading_dims().1, self.grid.patch_dims.1, self.grid.k_per_axis.1),
            (self.grading_dims().2, self.grid.patch_dims.2, self.grid.k_per_axis.2),
        ] {
            if p > d {
                return Err(Error::config(format!(
                    "patch dim {p} exceeds grading-resolution dim {d} (phantom dims {:?})",
                    self.phantom.dims
                )));
            }
            if k == 0 {
                return Err(Error::config("k_per_axis entries must be positive"));
            }
        }
        Ok(())
    }

    /// Grading-resolution dims implied by the phantom volume dims.
    pub fn grading_dims(&self) -> (usize, usize, usize) {
        (
            self.phantom.dims.0.div_ceil(2),
            self.phantom.dims.1.div_ceil(2),
            self.phantom.dims.2.div_ceil(2),
        )
    }

    /// Write the resolved configuration next to a command's outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let json = serde_json::to_string_pretty(self).expect("serializable config");
        std::fs::write(out_dir.join("resolved_config.json"), json)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_resolves_and_validates() {
        let mut cfg = RunConfig::default();
        cfg.resolve();
        cfg.validate().unwrap();
        assert_ne!(cfg.phantom.seed, cfg.train.seed);
        assert_ne!(cfg.train.seed, cfg.classifier.seed);
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"seed": 1, "bogus_key": true}"#;
        let parsed: std::result::Result<RunConfig, _> = serde_json::from_str(json);
        assert!(parsed.is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let json = r#"{"seed": 7, "repetitions": 3}"#;
        let mut cfg: RunConfig = serde_json::from_str(json).unwrap();
        cfg.resolve();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.repetitions, 3);
        assert_eq!(cfg.grid.patch_dims, (12, 14, 12));
    }

    #[test]
    fn seed_override_changes_derived_seeds() {
        let mut a = RunConfig::default();
        a.resolve();
        let mut b = RunConfig::default();
        b.seed = 43;
        b.resolve();
        assert_ne!(a.phantom.seed, b.phantom.seed);
    }

    #[test]
    fn roundtrip_and_resolved_write() {
        let dir = std::env::temp_dir().join(format!("voxgrade-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut cfg = RunConfig::default();
        cfg.resolve();
        cfg.write_resolved(&dir).unwrap();
        let back = RunConfig::load(&dir.join("resolved_config.json")).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.phantom.seed, cfg.phantom.seed);
    }

    #[test]
    fn oversized_patch_rejected() {
        let mut cfg = RunConfig::default();
        cfg.grid.patch_dims = (40, 14, 12);
        cfg.resolve();
        assert!(cfg.validate().is_err());
    }
}
