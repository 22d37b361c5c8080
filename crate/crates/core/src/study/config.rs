use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dosesim::{dose_schedule, DoseFraction, DoseModel};
use crate::error::{Error, Result};
use crate::evalstat::MetricOptions;
use crate::nn::VNetConfig;
use crate::phantom::PhantomConfig;
use crate::register::RegistrationConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Output voxel spacing in mm.
    pub target_spacing: [f64; 3],
    /// Crop box shape; boxes are centre-padded or clipped to this.
    pub crop_dims: [usize; 3],
    /// Voxels added around the ses-01 brain mask before fitting the box.
    pub margin: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_spacing: [1.0; 3],
            crop_dims: [32; 3],
            margin: 2,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!("target_spacing must be positive, got {:?}", self.target_spacing)));
        }
        if self.crop_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("crop_dims must be positive, got {:?}", self.crop_dims)));
        }
        Ok(())
    }
}

/// Everything one study run depends on. `seed` overrides the seeds inside
/// `phantom` and `train` (see [`StudyConfig::resolved`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub phantom: PhantomConfig,
    pub dose_levels: Vec<f64>,
    pub dose_model: DoseModel,
    pub registration: RegistrationConfig,
    pub preprocess: PreprocessConfig,
    pub vnet: VNetConfig,
    /// `train.dose` is the primary dose used by `train` and `evaluate`.
    pub train: TrainConfig,
    /// Train/validation/test fractions.
    pub split: [f64; 3],
    pub metrics: MetricOptions,
    /// Significance level for the normality gate.
    pub alpha: f64,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            dose_levels: vec![0.10, 0.15, 0.20, 0.25, 0.33],
            dose_model: DoseModel::default(),
            registration: RegistrationConfig::default(),
            preprocess: PreprocessConfig::default(),
            vnet: VNetConfig::desk(),
            train: TrainConfig::default(),
            split: [0.7, 0.1, 0.2],
            metrics: MetricOptions::default(),
            alpha: 0.05,
            output_dir: PathBuf::from("lvce-study"),
            seed: 0,
        }
    }
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("study config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Copy with the top-level seed pushed into the sub-configs.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.phantom.seed = c.seed;
        c.train.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        dose_schedule(&self.dose_levels)?;
        self.dose_model.validate()?;
        self.registration.validate()?;
        self.preprocess.validate()?;
        self.vnet.validate()?;
        self.train.validate()?;
        self.metrics.ssim.validate()?;
        if !(self.metrics.data_range > 0.0) {
            return Err(Error::invalid("metrics.data_range must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        let multiple = self.vnet.size_multiple();
        if self.preprocess.crop_dims.iter().any(|d| d % multiple != 0) {
            return Err(Error::invalid(format!(
                "crop_dims {:?} must be divisible by {multiple} for a {}-level V-Net",
                self.preprocess.crop_dims, self.vnet.levels
            )));
        }
        if self.metrics.ssim.window > *self.preprocess.crop_dims.iter().min().expect("three dims") {
            return Err(Error::invalid("crop_dims are smaller than the SSIM window"));
        }
        // fractions are checked by the splitter itself
        crate::phantom::split_indices(self.phantom.n_subjects, self.split, self.seed)?;
        Ok(())
    }

    /// Check the output directory can be created and written.
    pub fn check_output_dir(&self) -> Result<()> {
        let dir = &self.output_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let probe = dir.join(".lvce-write-probe");
        std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
        std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
    }

    pub fn primary_dose(&self) -> DoseFraction {
        self.train.dose
    }

    /// SHA-256 of the resolved config, with `output_dir` blanked so the hash
    /// only reflects content.
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.output_dir = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_partial_json_fills_in() {
        let c = StudyConfig::default();
        c.validate().unwrap();
        let p = StudyConfig::from_json(r#"{"seed": 7, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(p.train.epochs, 3);
        assert_eq!(p.train.lr, 1e-4);
        assert_eq!(p.resolved().phantom.seed, 7);
        assert_ne!(p.hash(), c.hash());
        let moved = StudyConfig { output_dir: "elsewhere".into(), ..c.clone() };
        assert_eq!(moved.hash(), c.hash());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(StudyConfig::from_json("{\"seed\": \"x\"}").is_err());
        for bad in [
            StudyConfig { dose_levels: vec![0.0], ..Default::default() },
            StudyConfig { alpha: 1.5, ..Default::default() },
            StudyConfig {
                preprocess: PreprocessConfig { crop_dims: [30, 32, 32], ..Default::default() },
                ..Default::default()
            },
            StudyConfig { phantom: PhantomConfig { n_subjects: 0, ..Default::default() }, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidArgument(_))), "{bad:?}");
        }
    }
}
