//! Run configuration. Everything that determines the trained weights lives at
//! the top level and is hashed into checkpoints; the `run` section only says
//! how long to train and where to write.

use std::path::{Path, PathBuf};

use latte_core::backbone::ModelConfig;
use latte_core::checkpoint::config_hash;
use latte_core::data::{Codec, MovingShapes};
use latte_core::diffusion::ScheduleConfig;
use latte_core::embedding::LatentShape;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

fn one() -> usize {
    1
}

fn eight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Procedural moving squares, one fresh video per draw.
    MovingShapes {
        height: usize,
        width: usize,
        #[serde(default = "one")]
        channels: usize,
        #[serde(default)]
        num_classes: Option<usize>,
        #[serde(default = "one")]
        interval: usize,
        #[serde(default)]
        hflip: f64,
        #[serde(default = "eight")]
        codec_factor: usize,
    },
    /// Directory of videos, each a subdirectory of PGM/PPM frames.
    Directory {
        path: PathBuf,
        #[serde(default = "one")]
        interval: usize,
        #[serde(default)]
        hflip: f64,
        #[serde(default = "eight")]
        codec_factor: usize,
    },
}

impl DatasetSpec {
    pub fn codec(&self) -> CliResult<Codec> {
        let factor = match self {
            DatasetSpec::MovingShapes { codec_factor, .. } | DatasetSpec::Directory { codec_factor, .. } => *codec_factor,
        };
        Codec::new(factor).map_err(CliError::config)
    }

    pub fn interval(&self) -> usize {
        match self {
            DatasetSpec::MovingShapes { interval, .. } | DatasetSpec::Directory { interval, .. } => *interval,
        }
    }

    pub fn hflip(&self) -> f64 {
        match self {
            DatasetSpec::MovingShapes { hflip, .. } | DatasetSpec::Directory { hflip, .. } => *hflip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunControl {
    pub output_dir: PathBuf,
    pub steps: u64,
    #[serde(default = "one_u64")]
    pub log_every: u64,
    /// 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

fn one_u64() -> u64 {
    1
}

impl Default for RunControl {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/latte"),
            steps: 0,
            log_every: 1,
            checkpoint_every: 0,
            resume: None,
        }
    }
}

fn default_ema() -> f64 {
    0.9999
}

fn default_vlb() -> f64 {
    0.001
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    pub batch_size: usize,
    /// Image frames appended to each clip; `None` means half the clip length.
    #[serde(default)]
    pub extra_images: Option<usize>,
    pub dataset: DatasetSpec,
    #[serde(default = "default_vlb")]
    pub vlb_weight: f64,
    pub seed: u64,
    #[serde(default)]
    pub run: RunControl,
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The run desk-scale tests train: interleaved, 4 blocks of width 64,
    /// 4-frame clips of 32×32 grayscale squares packed into 16×16×4 latents.
    pub fn desk(output_dir: impl Into<PathBuf>, steps: u64) -> Self {
        Self {
            model: ModelConfig::desk(),
            schedule: ScheduleConfig::scaled(250),
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            ema_decay: 0.99,
            batch_size: 4,
            extra_images: Some(2),
            dataset: DatasetSpec::MovingShapes {
                height: 32,
                width: 32,
                channels: 1,
                num_classes: None,
                interval: 1,
                hflip: 0.0,
                codec_factor: 2,
            },
            vlb_weight: 0.001,
            seed: 0,
            run: RunControl {
                output_dir: output_dir.into(),
                steps,
                log_every: 1,
                checkpoint_every: 0,
                resume: None,
            },
        }
    }

    pub fn extra_images(&self) -> usize {
        self.extra_images.unwrap_or(self.model.frames / 2)
    }

    /// Weight-determining part of the config; `run` is excluded so a longer
    /// run can resume from a shorter one.
    pub fn identity(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("run");
        v
    }

    pub fn identity_hash(&self) -> String {
        config_hash(&self.identity())
    }

    /// Reads the weight-determining part back from a checkpoint manifest.
    pub fn from_identity(value: &serde_json::Value) -> CliResult<Self> {
        let config: RunConfig =
            serde_json::from_value(value.clone()).map_err(|e| CliError::Config(format!("checkpoint config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn pixel_shape(&self) -> (usize, usize, usize) {
        match &self.dataset {
            DatasetSpec::MovingShapes {
                height,
                width,
                channels,
                ..
            } => (*height, *width, *channels),
            // Directory extents are only known after import.
            DatasetSpec::Directory { codec_factor, .. } => (
                self.model.latent_height * codec_factor,
                self.model.latent_width * codec_factor,
                self.model.latent_channels / (codec_factor * codec_factor),
            ),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model.validate().map_err(CliError::config)?;
        latte_core::diffusion::DiffusionSchedule::from_config(&self.schedule).map_err(CliError::config)?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return bad("optimizer: lr and eps must be positive, weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer: betas must lie in [0, 1)".into());
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay {} outside (0, 1)", self.ema_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.vlb_weight >= 0.0 && self.vlb_weight.is_finite()) {
            return bad("vlb_weight must be a non-negative number".into());
        }
        let stride = self.model.stride();
        if !self.extra_images().is_multiple_of(stride) {
            return bad(format!("extra_images {} must be a multiple of the temporal stride {stride}", self.extra_images()));
        }
        let hflip = self.dataset.hflip();
        if !(0.0..=1.0).contains(&hflip) {
            return bad(format!("hflip probability {hflip} outside [0, 1]"));
        }
        if self.dataset.interval() == 0 {
            return bad("sampling interval must be positive".into());
        }
        match &self.dataset {
            DatasetSpec::MovingShapes {
                height,
                width,
                channels,
                num_classes,
                ..
            } => {
                let classes = num_classes.unwrap_or(4);
                MovingShapes {
                    height: *height,
                    width: *width,
                    channels: *channels,
                    num_classes: classes,
                }
                .validate()
                .map_err(CliError::config)?;
                if num_classes.is_some() != self.model.num_classes.is_some()
                    || num_classes.is_some_and(|k| Some(k) != self.model.num_classes)
                {
                    return bad("dataset and model disagree on num_classes".into());
                }
                // Mirroring reverses the motion that defines the class.
                if num_classes.is_some() && hflip > 0.0 {
                    return bad("hflip cannot be combined with direction classes".into());
                }
            }
            DatasetSpec::Directory { .. } => {
                if self.model.num_classes.is_some() {
                    return bad("directory datasets carry no labels; set model.num_classes to null".into());
                }
            }
        }
        let (h, w, c) = self.pixel_shape();
        let latent = self
            .dataset
            .codec()?
            .latent_shape(self.model.frames, h, w, c)
            .map_err(CliError::config)?;
        if latent != self.model.latent_shape() {
            return bad(format!(
                "codec maps {h}x{w}x{c} pixels to {:?}, model expects {:?}",
                latent.dims(),
                self.model.latent_shape().dims()
            ));
        }
        if self.run.log_every == 0 {
            return bad("run.log_every must be positive".into());
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> LatentShape {
        self.model.latent_shape()
    }
}
