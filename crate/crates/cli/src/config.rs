//! Run configuration: every module's knobs in one TOML file.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mimicforge_core::augment::AugmentConfig;
use mimicforge_core::masker::MaskPolicy;
use mimicforge_core::matcher::SiftParams;
use mimicforge_core::sampler::SelectionBand;
use mimicforge_diffcore::codec::PATCH;
use mimicforge_diffcore::conditions::TrainConfig;
use mimicforge_diffcore::sample::SampleConfig;
use mimicforge_diffcore::schedule::ScheduleConfig;
use mimicforge_diffcore::unet::ModelConfig;

use crate::Invalid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    /// Square side every image is padded and resized to.
    pub resolution: usize,
    pub pairs_per_video: usize,
    /// Pseudo pairs drawn from each still.
    pub pairs_per_still: usize,
    /// Cap on the mixed manifest; 0 keeps every pair.
    pub max_pairs: usize,
    pub video_fraction: f64,
    /// Upper bound of the seeded dilation applied to object masks.
    pub max_dilate: usize,
    pub ratio: f32,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            pairs_per_video: 4,
            pairs_per_still: 1,
            max_pairs: 0,
            video_fraction: 0.7,
            max_dilate: 8,
            ratio: 0.8,
        }
    }
}

/// Default locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; overrides the `seed` fields of `train` and `sample`.
    pub seed: u64,
    pub paths: Paths,
    pub prepare: PrepareConfig,
    pub selection: SelectionBand,
    pub augment: AugmentConfig,
    pub mask: MaskPolicy,
    pub sift: SiftParams,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Invalid(format!("config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Sets the master seed everywhere it is consumed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.sample.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.prepare.resolution;
        ensure!(
            r >= 16 && r % PATCH == 0,
            Invalid(format!("prepare.resolution = {r} must be a multiple of {PATCH} and at least 16"))
        );
        ensure!(
            (0.0..=1.0).contains(&self.prepare.video_fraction),
            Invalid(format!("prepare.video_fraction = {} outside [0, 1]", self.prepare.video_fraction))
        );
        ensure!(
            self.prepare.ratio > 0.0 && self.prepare.ratio <= 1.0,
            Invalid(format!("prepare.ratio = {} outside (0, 1]", self.prepare.ratio))
        );
        ensure!(self.sample.steps > 0, Invalid("sample.steps must be positive".into()));
        let wrap = |e: String| Invalid(e);
        self.selection.validate().map_err(|e| wrap(e.to_string()))?;
        self.augment.validate().map_err(|e| wrap(e.to_string()))?;
        self.mask.validate().map_err(|e| wrap(e.to_string()))?;
        self.model.validate().map_err(|e| wrap(e.to_string()))?;
        self.train.validate().map_err(|e| wrap(e.to_string()))?;
        ensure!(
            self.sample.guidance_scale >= 0.0 && self.sample.guidance_scale.is_finite(),
            Invalid("sample.guidance_scale must be finite and non-negative".into())
        );
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every field except `paths`, so
    /// the digest ignores key order, formatting, and where files live.
    pub fn hash_bytes(&self) -> [u8; 32] {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("paths");
        }
        // serde_json's default map is ordered, so this rendering is canonical.
        let canonical = serde_json::to_vec(&v).expect("config serializes");
        Sha256::digest(&canonical).into()
    }

    pub fn hash(&self) -> String {
        hex(&self.hash_bytes())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order_and_paths() {
        let a: RunConfig = toml::from_str("seed = 3\n[train]\nlr = 0.001\nbatch = 2\n").unwrap();
        let b: RunConfig =
            toml::from_str("seed = 3\n[paths]\ndataset = \"/x\"\n[train]\nbatch = 2\nlr = 0.001\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 4, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn defaults_validate_and_unknown_keys_fail() {
        assert!(RunConfig::default().validate().is_ok());
        assert!(toml::from_str::<RunConfig>("sede = 1\n").is_err());
        let bad = RunConfig {
            prepare: PrepareConfig {
                resolution: 20,
                ..PrepareConfig::default()
            },
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
