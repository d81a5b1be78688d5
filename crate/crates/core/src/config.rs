//! Experiment configuration, stored as TOML with a `format_version` key.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adam::AdamSettings;
use crate::codes::CodeSpec;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, NoisyLabelPolicy};
use crate::networks::{ArchPreset, PresetName};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: u64,
}

impl OptimSettings {
    pub fn adam(&self) -> AdamSettings {
        AdamSettings {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

/// IDX file locations. Labels are only read by evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train_images: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

impl DataPaths {
    /// The four standard MNIST file names under `dir`.
    pub fn mnist_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self {
            train_images: d.join("train-images-idx3-ubyte"),
            train_labels: Some(d.join("train-labels-idx1-ubyte")),
            test_images: Some(d.join("t10k-images-idx3-ubyte")),
            test_labels: Some(d.join("t10k-labels-idx1-ubyte")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingOptions {
    /// Also train the encoder against the discriminator (pulling Enc(X) toward
    /// what D calls generated). Off by default: Enc(X) is the data distribution.
    #[serde(default)]
    pub encoder_adversarial: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub preset: PresetName,
    pub seed: u64,
    /// Steps between checkpoints.
    pub checkpoint_interval: u64,
    pub output_dir: PathBuf,
    pub data: DataPaths,
    pub codes: CodeSpec,
    pub loss: LossWeights,
    pub noisy_labels: NoisyLabelPolicy,
    pub optim: OptimSettings,
    #[serde(default)]
    pub training: TrainingOptions,
}

impl ExperimentConfig {
    /// Defaults for a preset: lr 2e-4, Adam β = (0.5, 0.9), batch 128, and the
    /// per-dataset λ weights.
    pub fn preset_default(name: PresetName) -> Self {
        let preset = ArchPreset::get(name);
        let (lambda_cont, lambda_disc) = match name {
            PresetName::Mnist => (1.0, 0.1),
            PresetName::Chair3d => (1.0, 10.0),
            PresetName::Celeba | PresetName::Tiny => (1.0, 1.0),
        };
        let data = match name {
            PresetName::Mnist => DataPaths::mnist_dir("data/mnist"),
            other => DataPaths {
                train_images: PathBuf::from(format!("data/{}/train-images.idx", other.as_str())),
                train_labels: None,
                test_images: None,
                test_labels: None,
            },
        };
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            preset: name,
            seed: 0,
            checkpoint_interval: 1000,
            output_dir: PathBuf::from(format!("runs/{}", name.as_str())),
            data,
            codes: preset.code_spec,
            loss: LossWeights {
                lambda_cont,
                lambda_disc,
            },
            noisy_labels: NoisyLabelPolicy::default(),
            optim: OptimSettings {
                learning_rate: 2e-4,
                beta1: 0.5,
                beta2: 0.9,
                batch_size: 128,
                epochs: 30,
            },
            training: TrainingOptions::default(),
        }
    }

    /// Preset with this config's code intervals substituted.
    pub fn arch(&self) -> ArchPreset {
        let mut p = ArchPreset::get(self.preset);
        p.code_spec = self.codes.clone();
        p
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Error::Config(m);
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(cfg(format!(
                "format_version {} unsupported (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.codes.validate().map_err(|e| cfg(format!("codes: {e}")))?;
        let preset = ArchPreset::get(self.preset);
        if !self.codes.same_layout(&preset.code_spec) {
            return Err(cfg(format!(
                "codes layout does not match preset {}: expected noise_dim {}, categoricals {:?}, {} continuous",
                self.preset.as_str(),
                preset.code_spec.noise_dim,
                preset.code_spec.categoricals,
                preset.code_spec.continuous.len()
            )));
        }
        self.loss.validate().map_err(|e| cfg(format!("loss: {e}")))?;
        self.noisy_labels.validate().map_err(|e| cfg(format!("noisy_labels: {e}")))?;
        let o = &self.optim;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(cfg(format!("optim.learning_rate must be positive, got {}", o.learning_rate)));
        }
        for (name, b) in [("beta1", o.beta1), ("beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(cfg(format!("optim.{name} must lie in [0, 1), got {b}")));
            }
        }
        if o.batch_size == 0 {
            return Err(cfg("optim.batch_size must be positive".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(cfg("checkpoint_interval must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// True when a run under `other` can resume from a checkpoint written under
    /// `self`: everything except the epoch budget, checkpoint cadence and
    /// output location must agree.
    pub fn resumable_from(&self, other: &ExperimentConfig) -> bool {
        let strip = |c: &ExperimentConfig| {
            let mut c = c.clone();
            c.optim.epochs = 0;
            c.checkpoint_interval = 1;
            c.output_dir = PathBuf::new();
            c.data = DataPaths {
                train_images: PathBuf::new(),
                train_labels: None,
                test_images: None,
                test_labels: None,
            };
            c
        };
        strip(self) == strip(other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        for name in [PresetName::Mnist, PresetName::Chair3d, PresetName::Celeba, PresetName::Tiny] {
            let c = ExperimentConfig::preset_default(name);
            let text = c.to_toml();
            let back = ExperimentConfig::from_toml(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_toml(), text);
        }
    }

    #[test]
    fn mnist_defaults() {
        let c = ExperimentConfig::preset_default(PresetName::Mnist);
        assert_eq!(c.loss.lambda_cont, 1.0);
        assert_eq!(c.loss.lambda_disc, 0.1);
        assert_eq!(c.optim.batch_size, 128);
        assert_eq!(c.optim.learning_rate, 0.0002);
        assert_eq!((c.optim.beta1, c.optim.beta2), (0.5, 0.9));
        assert_eq!(ExperimentConfig::preset_default(PresetName::Chair3d).loss.lambda_disc, 10.0);
        assert_eq!(ExperimentConfig::preset_default(PresetName::Celeba).loss.lambda_disc, 1.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = ExperimentConfig::preset_default(PresetName::Mnist).to_toml();
        text = text.replace("seed = 0", "seed = 0\nsurprise = 1");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn layout_must_match_preset() {
        let mut c = ExperimentConfig::preset_default(PresetName::Mnist);
        c.codes.categoricals = vec![12];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::preset_default(PresetName::Mnist);
        c.codes.traversal_range = (-2.0, 2.0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn optimizer_bounds() {
        let mut c = ExperimentConfig::preset_default(PresetName::Mnist);
        c.optim.beta2 = 1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::preset_default(PresetName::Mnist);
        c.optim.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }
}
