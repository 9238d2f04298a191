//! Run configuration: one TOML file with a section per module, plus the
//! shipped presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::i2v::I2vConfig;
use crate::phantom::PhantomConfig;
use crate::tddm::TddmConfig;
use crate::trainer::TrainerConfig;
use crate::vae::VaeConfig;

/// File name of the resolved config written next to every run's outputs.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

pub const PRESETS: [&str; 3] = ["paper", "desk", "smoke"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub grid: [usize; 3],
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Inclusive frame-number range.
    pub frame_min: usize,
    pub frame_max: usize,
    pub amplitude: f64,
    pub background_drift: f64,
    pub texture_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub vae: TrainerConfig,
    pub tddm: TrainerConfig,
    pub i2v: TrainerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    /// Test sequences used by `evaluate` and `ablate`; 0 means all.
    pub eval_sequences: usize,
    /// Write PNG montages next to reports.
    pub montage: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub phantom: PhantomSection,
    pub vae: VaeConfig,
    pub tddm: TddmConfig,
    pub i2v: I2vConfig,
    pub trainer: TrainerSection,
    pub metrics: MetricsSection,
}

fn trainer(lr: f64, warmup: usize, epochs: usize, seed: u64) -> TrainerConfig {
    TrainerConfig { learning_rate: lr, warmup_steps: warmup, epochs, seed, ..Default::default() }
}

impl RunConfig {
    /// Full-scale training defaults: lr 1e-4, 500 epochs, 500 warmup
    /// steps, T = 1000.
    pub fn paper() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/paper"),
            phantom: PhantomSection {
                grid: [32, 32, 32],
                n_train: 100,
                n_val: 20,
                n_test: 30,
                frame_min: 6,
                frame_max: 16,
                amplitude: 0.2,
                background_drift: 0.0,
                texture_scale: 1.0,
            },
            vae: VaeConfig::default(),
            tddm: TddmConfig::default(),
            i2v: I2vConfig::default(),
            trainer: TrainerSection {
                vae: TrainerConfig { seed: 1, ..Default::default() },
                tddm: TrainerConfig { seed: 2, ..Default::default() },
                i2v: TrainerConfig { seed: 3, ..Default::default() },
            },
            metrics: MetricsSection { eval_sequences: 0, montage: true },
        }
    }

    /// One-CPU budget: narrower VAE, 100-step chains, larger learning rates.
    pub fn desk() -> Self {
        let schedule = ScheduleConfig::compressed(100);
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            phantom: PhantomSection { n_train: 40, n_val: 4, ..Self::paper().phantom },
            vae: VaeConfig { base_width: 4, ..Default::default() },
            tddm: TddmConfig { schedule, ..Default::default() },
            i2v: I2vConfig { schedule, ..Default::default() },
            trainer: TrainerSection {
                vae: trainer(3e-3, 50, 24, 1),
                tddm: trainer(2e-3, 50, 200, 2),
                i2v: trainer(2e-3, 50, 200, 3),
            },
            metrics: MetricsSection { eval_sequences: 30, montage: true },
        }
    }

    /// Seconds-scale run for wiring checks: 16³ grid, 4 sequences.
    pub fn smoke() -> Self {
        let schedule = ScheduleConfig::compressed(20);
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/smoke"),
            phantom: PhantomSection {
                grid: [16, 16, 16],
                n_train: 1,
                n_val: 1,
                n_test: 2,
                frame_min: 6,
                frame_max: 8,
                ..Self::paper().phantom
            },
            vae: VaeConfig { base_width: 4, latent_channels: 2, ..Default::default() },
            tddm: TddmConfig { width: 4, emb_dim: 8, schedule, ..Default::default() },
            i2v: I2vConfig { latent_channels: 2, width: 4, emb_dim: 8, schedule, ..Default::default() },
            trainer: TrainerSection {
                vae: trainer(3e-3, 1, 2, 1),
                tddm: trainer(3e-3, 1, 2, 2),
                i2v: trainer(3e-3, 1, 2, 3),
            },
            metrics: MetricsSection { eval_sequences: 0, montage: true },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected one of {PRESETS:?}"))),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }

    /// Writes the resolved config into `dir` and returns its path.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }

    /// Base phantom settings for dataset generation.
    pub fn phantom_base(&self) -> PhantomConfig {
        let p = &self.phantom;
        PhantomConfig {
            seed: self.seed,
            grid: p.grid,
            frame_number: p.frame_min,
            amplitude: p.amplitude,
            background_drift: p.background_drift,
            texture_scale: p.texture_scale,
            downsample_factor: self.vae.downsample_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.phantom;
        if p.n_train == 0 || p.n_val == 0 || p.n_test == 0 {
            return Err(Error::Config("phantom split sizes must be positive".into()));
        }
        if p.frame_min < 2 || p.frame_max < p.frame_min || p.frame_max > crate::tddm::TEMPORAL_CHANNELS {
            return Err(Error::Config(format!("frame range {}..={} outside 2..=16", p.frame_min, p.frame_max)));
        }
        self.phantom_base().validate()?;
        self.vae.validate()?;
        self.tddm.validate()?;
        self.i2v.validate()?;
        if self.i2v.latent_channels != self.vae.latent_channels {
            return Err(Error::Config(format!(
                "i2v.latent_channels {} differs from vae.latent_channels {}",
                self.i2v.latent_channels, self.vae.latent_channels
            )));
        }
        let latent = self.vae.downsample_factor;
        let field = self.tddm.working_downsample;
        if field > latent || latent % field != 0 || latent / field != self.i2v.field_stride {
            return Err(Error::Config(format!(
                "i2v.field_stride {} must equal vae.downsample_factor / tddm.working_downsample = {latent}/{field}",
                self.i2v.field_stride
            )));
        }
        let latent_grid = p.grid.map(|d| d / latent);
        if latent_grid.iter().any(|d| d % 2 != 0) {
            return Err(Error::Config(format!("latent grid {latent_grid:?} must be even")));
        }
        if p.grid.iter().any(|d| (d / field) % 2 != 0 || d % field != 0) {
            return Err(Error::Config(format!("grid {:?} not compatible with working_downsample {field}", p.grid)));
        }
        Ok(())
    }
}
