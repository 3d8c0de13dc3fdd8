//! Experiment configuration: one TOML document pinning every setting a run
//! needs — model shapes, training schedules, data sources, seeds, output
//! locations — so that (config, seed) fully determines every artifact.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tvt_core::ce_unet::CeUnetSpec;
use tvt_core::degrade::DegradationConfig;
use tvt_core::losses::DiscSpec;
use tvt_core::optim::AdamConfig;
use tvt_core::sr::SrConfig;
use tvt_core::tvt::{TvtStage1Config, TvtStage2Config};
use tvt_core::vae::VaeSpec;

/// Scale preset a configuration derives from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Desk-scale: procedural 64x64 data, narrow models, minutes of CPU.
    Toy,
    /// Published-scale shapes and schedules; requires real data and far more
    /// compute than one desktop CPU.
    Paper,
}

/// How the compact autoencoder is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvtMode {
    /// Decoder against the frozen reference encoder, then encoder against
    /// the frozen decoder.
    TwoStage,
    /// Both halves jointly from scratch, no reference (ablation).
    JointScratch,
    /// Joint training plus an L1 penalty tying the compact latent to the
    /// reference encoder's latent of the 2x-upsampled image (ablation).
    JointAligned,
}

/// Procedural dataset settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDataConfig {
    /// Square image side in pixels.
    pub side: usize,
    /// Training images.
    pub train: usize,
    /// Held-out images for evaluation.
    pub held_out: usize,
}

/// Where training images come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of raster images; when unset, the procedural set is used.
    #[serde(default)]
    pub source: Option<PathBuf>,
    /// With a `source` directory, how many trailing images (in sorted
    /// order) are held out for evaluation.
    #[serde(default = "default_source_held_out")]
    pub source_held_out: usize,
    pub toy: ToyDataConfig,
}

fn default_source_held_out() -> usize {
    8
}

/// Every architecture the run builds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    /// Frozen 8x reference autoencoder.
    pub vae_ref: VaeSpec,
    /// Compact 4x autoencoder being trained.
    pub vae_compact: VaeSpec,
    pub discriminator: DiscSpec,
    /// Efficient denoiser wrapper (the base denoiser spec lives inside).
    pub ce: CeUnetSpec,
}

/// Where the reference autoencoder's weights come from. The published
/// pipeline loads a pretrained model; at desk scale one is trained here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    /// Load the reference from this checkpoint instead of pretraining it.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Joint reconstruction-training steps when no checkpoint is given.
    pub pretrain_steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub kl_weight: f64,
}

/// Compact-autoencoder training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvtConfig {
    pub mode: TvtMode,
    /// Weight of the latent-alignment penalty in `joint_aligned` mode.
    pub align_weight: f64,
    pub stage1: TvtStage1Config,
    pub stage2: TvtStage2Config,
}

/// Restoration training settings beyond the core step configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrPhaseConfig {
    pub steps: u64,
    /// Synthesized training pairs.
    pub pair_count: usize,
    /// Synthesized held-out pairs for evaluation.
    pub held_out_pairs: usize,
    /// High-resolution crop side; the low-res side is this over the
    /// degradation's final scale.
    pub crop: usize,
    pub train: SrConfig,
    pub degradation: DegradationConfig,
}

/// The complete experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Steps between periodic checkpoints within a phase.
    pub checkpoint_every: u64,
    pub data: DataConfig,
    pub models: ModelsConfig,
    pub reference: ReferenceConfig,
    pub tvt: TvtConfig,
    pub sr: SrPhaseConfig,
}

impl ExperimentConfig {
    /// Desk-scale defaults: 64x64 procedural crops, 500 training images,
    /// 2k steps per stage.
    pub fn toy() -> Self {
        ExperimentConfig {
            preset: Preset::Toy,
            seed: 17,
            output_dir: PathBuf::from("runs/toy"),
            checkpoint_every: 500,
            data: DataConfig {
                source: None,
                source_held_out: default_source_held_out(),
                toy: ToyDataConfig {
                    side: 64,
                    train: 500,
                    held_out: 16,
                },
            },
            models: ModelsConfig {
                vae_ref: VaeSpec::d8_toy(),
                vae_compact: VaeSpec::d4_toy(),
                discriminator: DiscSpec::toy(),
                ce: CeUnetSpec::toy(),
            },
            reference: ReferenceConfig {
                checkpoint: None,
                pretrain_steps: 2000,
                batch_size: 2,
                optimizer: AdamConfig::with_lr(1e-3),
                kl_weight: 1e-6,
            },
            tvt: TvtConfig {
                mode: TvtMode::TwoStage,
                align_weight: 1.0,
                stage1: TvtStage1Config {
                    optimizer: AdamConfig::with_lr(1e-3),
                    ..TvtStage1Config::default()
                },
                stage2: TvtStage2Config {
                    optimizer: AdamConfig::with_lr(1e-3),
                    ..TvtStage2Config::default()
                },
            },
            sr: SrPhaseConfig {
                steps: 2000,
                pair_count: 500,
                held_out_pairs: 16,
                crop: 64,
                train: SrConfig::toy(),
                degradation: DegradationConfig::default(),
            },
        }
    }

    /// Published-scale shapes and schedules: 512x512 training images,
    /// autoencoder stages of 2e5 iterations at batch 256, restoration
    /// training of 2e4 iterations at batch 16 with learning rate 5e-5 and
    /// adapter rank 4.
    pub fn paper() -> Self {
        let lr = AdamConfig::with_lr(5e-5);
        ExperimentConfig {
            preset: Preset::Paper,
            seed: 17,
            output_dir: PathBuf::from("runs/paper"),
            checkpoint_every: 5000,
            data: DataConfig {
                source: None,
                source_held_out: default_source_held_out(),
                toy: ToyDataConfig {
                    side: 512,
                    train: 500,
                    held_out: 16,
                },
            },
            models: ModelsConfig {
                vae_ref: VaeSpec::d8_full(),
                vae_compact: VaeSpec::d4_full(),
                discriminator: DiscSpec::full(),
                ce: CeUnetSpec::sd_full(),
            },
            reference: ReferenceConfig {
                checkpoint: None,
                pretrain_steps: 200_000,
                batch_size: 256,
                optimizer: lr,
                kl_weight: 1e-6,
            },
            tvt: TvtConfig {
                mode: TvtMode::TwoStage,
                align_weight: 1.0,
                stage1: TvtStage1Config {
                    total_steps: 200_000,
                    batch_size: 256,
                    gan_start_step: 50_000,
                    optimizer: lr,
                    disc_optimizer: lr,
                    ..TvtStage1Config::default()
                },
                stage2: TvtStage2Config {
                    total_steps: 200_000,
                    batch_size: 256,
                    optimizer: lr,
                    ..TvtStage2Config::default()
                },
            },
            sr: SrPhaseConfig {
                steps: 20_000,
                pair_count: 100_000,
                held_out_pairs: 100,
                crop: 512,
                train: SrConfig {
                    optimizer: lr,
                    ..SrConfig::default()
                },
                degradation: DegradationConfig::default(),
            },
        }
    }

    pub fn for_preset(p: Preset) -> Self {
        match p {
            Preset::Toy => Self::toy(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Parses a TOML file; unknown or ill-typed fields fail with the field
    /// named in the error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes the resolved document (written next to the artifacts).
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Cross-field validation on top of each section's own checks.
    pub fn validate(&self) -> Result<()> {
        self.models.vae_ref.validate()?;
        self.models.vae_compact.validate()?;
        self.models.discriminator.validate()?;
        self.models.ce.validate()?;
        self.tvt.stage1.validate()?;
        self.tvt.stage2.validate()?;
        self.sr.train.validated_schedule()?;
        self.sr.degradation.validate()?;
        self.reference.optimizer.validate()?;

        if self.checkpoint_every == 0 {
            bail!("checkpoint_every must be positive");
        }
        if self.reference.batch_size == 0 {
            bail!("reference.batch_size must be positive");
        }
        if self.reference.kl_weight < 0.0 {
            bail!("reference.kl_weight must not be negative");
        }
        if self.tvt.align_weight < 0.0 {
            bail!("tvt.align_weight must not be negative");
        }
        if self.data.toy.side == 0 || self.data.toy.train == 0 {
            bail!("data.toy needs a positive side and train count");
        }
        let f = self.models.vae_compact.downsample_factor;
        if self.data.toy.side % (2 * self.models.vae_ref.downsample_factor) != 0 {
            bail!(
                "data.toy.side {} must be divisible by twice the reference factor {}",
                self.data.toy.side,
                self.models.vae_ref.downsample_factor
            );
        }
        let ce = &self.models.ce.base;
        if self.sr.train.context_dim != ce.context_dim
            || self.sr.train.context_len != ce.context_len
        {
            bail!(
                "sr.train context {}x{} does not match the denoiser's {}x{}",
                self.sr.train.context_len,
                self.sr.train.context_dim,
                ce.context_len,
                ce.context_dim
            );
        }
        let fs = self.sr.degradation.final_scale;
        if self.sr.crop == 0 || self.sr.crop % fs != 0 {
            bail!("sr.crop must be a positive multiple of {fs}");
        }
        if self.sr.crop % f != 0 {
            bail!(
                "sr.crop {} must be divisible by the compact factor {f}",
                self.sr.crop
            );
        }
        // The wrapper halves the latent before the base runs.
        if (self.sr.crop / f) % 2 != 0 {
            bail!(
                "sr.crop {} gives an odd latent side; the denoiser wrapper needs an even one",
                self.sr.crop
            );
        }
        if self.sr.steps == 0 || self.sr.pair_count == 0 || self.sr.held_out_pairs == 0 {
            bail!("sr.steps, sr.pair_count, and sr.held_out_pairs must be positive");
        }
        Ok(())
    }

    /// Hash of the complete resolved document; names every artifact lineage.
    pub fn config_hash(&self) -> String {
        sha_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Hash of the model shapes only; a checkpoint refuses to load into a
    /// store built from different shapes.
    pub fn spec_hash(&self) -> String {
        let doc = serde_json::to_string(&(
            &self.models,
            self.sr.train.context_len,
            self.sr.train.context_dim,
        ))
        .expect("specs serialize");
        sha_hex(doc.as_bytes())
    }
}

pub fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        use std::fmt::Write;
        write!(s, "{b:02x}").expect("hex into string");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_roundtrip_through_toml() {
        for cfg in [ExperimentConfig::toy(), ExperimentConfig::paper()] {
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            let back: ExperimentConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.config_hash(), cfg.config_hash());
        }
    }

    #[test]
    fn unknown_fields_are_rejected_by_name() {
        let mut text = ExperimentConfig::toy().to_toml().unwrap();
        text.push_str("\nmystery_knob = 3\n");
        let err = toml::from_str::<ExperimentConfig>(&text)
            .unwrap_err()
            .to_string();
        assert!(err.contains("mystery_knob"), "error was: {err}");
    }

    #[test]
    fn hashes_separate_schedule_changes_from_shape_changes() {
        let a = ExperimentConfig::toy();
        let mut b = a.clone();
        b.tvt.stage1.total_steps += 1;
        // A schedule tweak renames the run but not the model shapes.
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.spec_hash(), b.spec_hash());
        let mut c = a.clone();
        c.models.vae_compact.stage_channels[0] += 8;
        assert_ne!(a.spec_hash(), c.spec_hash());
    }

    #[test]
    fn cross_field_validation_catches_mismatched_context() {
        let mut cfg = ExperimentConfig::toy();
        cfg.sr.train.context_dim += 1;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("context"), "error was: {err}");
    }
}
