//! Experiment configuration.
//!
//! One TOML file drives every stage. Geometry (channels, height, width) is
//! stated once in `[data]` and flows into the model configs through the
//! accessor methods, so the autoencoders, the denoiser, and the dataset can
//! never silently disagree about shapes. Every section and field has a
//! default; a partial file overrides only what it names.

use crate::autoencoder::AutoencoderConfig;
use crate::data::SynthConfig;
use crate::denoiser::{ConditioningVariant, DenoiserConfig};
use crate::discrepancy::EnsembleTrainConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::ScheduleSpec;
use crate::trainer::DiffusionTrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    /// Run directory all stages read from and write to. The CLI lets the
    /// `MASKDIFF_OUT` environment variable override it.
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Ensemble hyperparameters minus geometry (which `[data]` owns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSection {
    pub members: usize,
    pub latent_dim: usize,
    pub widths: Vec<usize>,
    pub fc_layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        let ae = AutoencoderConfig::default();
        let train = EnsembleTrainConfig::default();
        Self {
            members: train.members,
            latent_dim: ae.latent_dim,
            widths: ae.widths,
            fc_layers: ae.fc_layers,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.lr,
            seed: train.seed,
        }
    }
}

/// Denoiser hyperparameters minus geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserSection {
    pub variant: ConditioningVariant,
    pub base_width: usize,
    pub depth: usize,
    pub res_blocks: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            variant: d.variant,
            base_width: d.base_width,
            depth: d.depth,
            res_blocks: d.res_blocks,
            time_embed_dim: d.time_embed_dim,
            groups: d.groups,
            seed: 0,
        }
    }
}

/// Denoiser training loop knobs; the schedule comes from `[schedule]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = DiffusionTrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturesSection {
    /// Min-max normalize each conditioning map to [0, 1] per slice before it
    /// reaches the denoiser. Off by default: raw magnitudes carry signal.
    pub normalize: bool,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        Self { normalize: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub paths: PathsSection,
    pub data: SynthConfig,
    pub schedule: ScheduleSpec,
    pub ensembles: EnsembleSection,
    pub denoiser: DenoiserSection,
    pub train: TrainSection,
    pub features: FeaturesSection,
    pub sampler: SamplerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            paths: PathsSection::default(),
            data: SynthConfig::default(),
            schedule: ScheduleSpec::default(),
            ensembles: EnsembleSection::default(),
            denoiser: DenoiserSection::default(),
            train: TrainSection::default(),
            features: FeaturesSection::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full autoencoder config with geometry filled in from `[data]`.
    pub fn autoencoder_config(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            in_channels: self.data.channels,
            height: self.data.height,
            width: self.data.width,
            latent_dim: self.ensembles.latent_dim,
            widths: self.ensembles.widths.clone(),
            fc_layers: self.ensembles.fc_layers,
        }
    }

    pub fn ensemble_train_config(&self) -> EnsembleTrainConfig {
        EnsembleTrainConfig {
            ae: self.autoencoder_config(),
            members: self.ensembles.members,
            epochs: self.ensembles.epochs,
            batch_size: self.ensembles.batch_size,
            lr: self.ensembles.lr,
            seed: self.ensembles.seed,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            modalities: self.data.channels,
            height: self.data.height,
            width: self.data.width,
            variant: self.denoiser.variant,
            base_width: self.denoiser.base_width,
            depth: self.denoiser.depth,
            res_blocks: self.denoiser.res_blocks,
            time_embed_dim: self.denoiser.time_embed_dim,
            groups: self.denoiser.groups,
        }
    }

    pub fn diffusion_train_config(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            schedule: self.schedule,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            seed: self.train.seed,
        }
    }

    /// Points every seeded stage at `seed`. Used by the CLI's `--seed`
    /// override to rerun a whole experiment under a different seed without
    /// editing the file.
    pub fn set_master_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.ensembles.seed = seed;
        self.denoiser.seed = seed;
        self.train.seed = seed;
        self.sampler.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.schedule.build().map_err(|e| invalid(&e))?;
        self.autoencoder_config().validate().map_err(|e| invalid(&e))?;
        self.denoiser_config().validate().map_err(|e| invalid(&e))?;
        self.sampler.validate().map_err(|e| invalid(&e))?;
        if self.ensembles.members < 2 {
            return Err(ConfigError::Invalid(format!(
                "ensembles need at least 2 members, got {}",
                self.ensembles.members
            )));
        }
        for (what, epochs, batch, lr) in [
            ("ensembles", self.ensembles.epochs, self.ensembles.batch_size, self.ensembles.lr),
            ("train", self.train.epochs, self.train.batch_size, self.train.lr),
        ] {
            if epochs == 0 {
                return Err(ConfigError::Invalid(format!("{what}.epochs must be positive")));
            }
            if batch == 0 {
                return Err(ConfigError::Invalid(format!("{what}.batch_size must be positive")));
            }
            if !(lr.is_finite() && lr > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "{what}.lr {lr} must be positive and finite"
                )));
            }
        }
        Ok(())
    }

    /// Stable identity of this configuration: SHA-256 over its canonical
    /// JSON form. Stage manifests carry it so stale outputs are detectable.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&json)
    }
}

/// Lowercase hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_overrides_only_named_fields() {
        let cfg: ExperimentConfig = toml::from_str(
            "[schedule]\nsteps = 50\n\n[denoiser]\nvariant = \"light\"\n",
        )
        .unwrap();
        assert_eq!(cfg.schedule.steps, 50);
        assert_eq!(cfg.schedule.beta_start, ScheduleSpec::default().beta_start);
        assert_eq!(cfg.denoiser.variant, ConditioningVariant::Light);
        assert_eq!(cfg.train, TrainSection::default());
    }

    #[test]
    fn geometry_flows_from_data_section() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.channels = 2;
        cfg.data.height = 32;
        cfg.data.width = 96;
        assert_eq!(cfg.autoencoder_config().in_channels, 2);
        assert_eq!(cfg.autoencoder_config().height, 32);
        assert_eq!(cfg.denoiser_config().modalities, 2);
        assert_eq!(cfg.denoiser_config().width, 96);
        assert_eq!(cfg.ensemble_train_config().ae.width, 96);
        assert_eq!(cfg.diffusion_train_config().schedule, cfg.schedule);
    }

    #[test]
    fn validation_catches_cross_section_problems() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());

        // height not divisible by the autoencoder's downsampling factor
        cfg.data.height = 40;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
        cfg.data.height = 64;

        cfg.ensembles.members = 1;
        assert!(cfg.validate().is_err());
        cfg.ensembles.members = 3;

        cfg.train.lr = 0.0;
        assert!(cfg.validate().is_err());
        cfg.train.lr = 1e-4;

        cfg.sampler.n_samples = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn master_seed_reaches_every_stage() {
        let mut cfg = ExperimentConfig::default();
        cfg.set_master_seed(123);
        assert_eq!(cfg.data.seed, 123);
        assert_eq!(cfg.ensembles.seed, 123);
        assert_eq!(cfg.denoiser.seed, 123);
        assert_eq!(cfg.train.seed, 123);
        assert_eq!(cfg.sampler.seed, 123);
    }

    #[test]
    fn hash_tracks_content_not_identity() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::default();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);

        let mut c = ExperimentConfig::default();
        c.train.epochs += 1;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn sha256_known_answer() {
        // FIPS 180-2 test vector for "abc"
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
