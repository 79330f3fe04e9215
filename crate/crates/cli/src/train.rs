//! Training loop. A producer thread builds batches into a bounded queue
//! while the main thread runs forward, backward and the optimizer.
//!
//! Every step draws its data from its own RNG stream, keyed by the run seed
//! and the step number, so a resumed run sees exactly the batches an
//! uninterrupted run would have seen.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread;
use std::time::Instant;

use latte_core::backbone::{init_params, Denoiser};
use latte_core::checkpoint::Checkpoint;
use latte_core::data::{build_joint_batch, clip_sample, clip_span, hflip_augment, import_videos, JointBatch, MovingShapes, VideoClip};
use latte_core::diffusion::{training_losses, DiffusionSchedule, EmaState};
use latte_core::embedding::{Conditioning, VideoLatent};
use latte_core::params::ParamStore;
use latte_core::tensor::{Element, Tensor};
use latte_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{DatasetSpec, RunConfig};
use crate::error::{CliError, CliResult};
use crate::optim::AdamW;

pub const METRICS_HEADER: &str = "step,l_simple,l_vlb,wall_ms";
pub const METRICS_FILE: &str = "metrics.csv";
const QUEUE_DEPTH: usize = 4;

/// RNG stream for one purpose at one step.
fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step * 4 + purpose);
    rng
}

const STREAM_DATA: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_INIT: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub l_simple: f64,
    pub l_vlb: f64,
    pub wall_ms: u64,
}

impl MetricRow {
    fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.l_simple, self.l_vlb, self.wall_ms)
    }
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(CliError::Other(format!("{}: unexpected header", path.display())));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || CliError::Other(format!("{}: bad row `{l}`", path.display()));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(MetricRow {
                step: f[0].parse().map_err(|_| bad())?,
                l_simple: f[1].parse().map_err(|_| bad())?,
                l_vlb: f[2].parse().map_err(|_| bad())?,
                wall_ms: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Where clips come from.
#[derive(Clone)]
pub enum ClipSource {
    Synthetic {
        generator: MovingShapes,
        labelled: bool,
        interval: usize,
    },
    Videos {
        videos: Vec<VideoClip>,
        interval: usize,
    },
}

impl ClipSource {
    pub fn from_config(config: &RunConfig) -> CliResult<Self> {
        Ok(match &config.dataset {
            DatasetSpec::MovingShapes {
                height,
                width,
                channels,
                num_classes,
                interval,
                ..
            } => ClipSource::Synthetic {
                generator: MovingShapes {
                    height: *height,
                    width: *width,
                    channels: *channels,
                    num_classes: num_classes.unwrap_or(4),
                },
                labelled: num_classes.is_some(),
                interval: *interval,
            },
            DatasetSpec::Directory { path, interval, .. } => {
                let videos = import_videos(path)?;
                let span = clip_span(config.model.frames, *interval);
                if !videos.iter().any(|v| v.frames >= span) {
                    return Err(CliError::Config(format!(
                        "no video under {} has the {span} frames a clip needs",
                        path.display()
                    )));
                }
                ClipSource::Videos {
                    videos: videos.into_iter().filter(|v| v.frames >= span).collect(),
                    interval: *interval,
                }
            }
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, frames: usize, rng: &mut R) -> latte_core::Result<(VideoClip, Option<usize>)> {
        match self {
            ClipSource::Synthetic {
                generator,
                labelled,
                interval,
            } => {
                let video = generator.clip(rng.gen(), clip_span(frames, *interval))?;
                let label = video.class_label.filter(|_| *labelled);
                Ok((clip_sample(&video, *interval, frames, rng)?, label))
            }
            ClipSource::Videos { videos, interval } => {
                let video = &videos[rng.gen_range(0..videos.len())];
                Ok((clip_sample(video, *interval, frames, rng)?, None))
            }
        }
    }
}

/// Batch for `step`: clips, then (if joint training) an independent pool of
/// clips whose frames are appended as images.
pub fn make_batch<T: Element>(config: &RunConfig, source: &ClipSource, step: u64) -> latte_core::Result<JointBatch<T>> {
    let mut rng = step_rng(config.seed, step, STREAM_DATA);
    let codec = config.dataset.codec().map_err(|e| Error::Config(e.to_string()))?;
    let frames = config.model.frames;
    let p = config.dataset.hflip();
    let draw = |rng: &mut ChaCha8Rng| -> latte_core::Result<(VideoLatent<T>, Option<usize>)> {
        let (clip, label) = source.draw(frames, rng)?;
        let (clip, _) = hflip_augment(&clip, p, rng);
        Ok((codec.encode(&clip)?, label))
    };
    let clips = (0..config.batch_size)
        .map(|_| draw(&mut rng))
        .collect::<latte_core::Result<Vec<_>>>()?;
    let extra = config.extra_images();
    let pool = if extra > 0 {
        (0..config.batch_size)
            .map(|_| draw(&mut rng).map(|(z, _)| z))
            .collect::<latte_core::Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    build_joint_batch(&clips, &pool, extra, &mut rng)
}

/// Everything a checkpoint restores.
pub struct TrainState<T: Element> {
    pub step: u64,
    pub params: ParamStore<T>,
    pub ema: EmaState<T>,
    pub optim: AdamW<T>,
}

impl<T: Element> TrainState<T> {
    pub fn fresh(config: &RunConfig) -> CliResult<Self> {
        let mut rng = step_rng(config.seed, 0, STREAM_INIT);
        let params = init_params::<T, _>(&config.model, &mut rng)?;
        Ok(Self {
            step: 0,
            ema: EmaState::new(&params, config.ema_decay)?,
            optim: AdamW::new(config.optimizer.clone(), &params),
            params,
        })
    }

    pub fn to_checkpoint(&self, config: &RunConfig) -> Checkpoint<T> {
        Checkpoint::new(self.step, config.identity())
            .with_group("model", self.params.clone())
            .with_group("ema", self.ema.shadow.clone())
            .with_group("adam_m", self.optim.m.clone())
            .with_group("adam_v", self.optim.v.clone())
    }

    /// Restores from `dir`, refusing a checkpoint written under a different
    /// weight-determining config.
    pub fn resume(config: &RunConfig, dir: &Path) -> CliResult<Self> {
        let ckpt = Checkpoint::<T>::load(dir)?;
        if ckpt.config_hash != config.identity_hash() {
            return Err(CliError::Config(format!(
                "checkpoint {} was written by a different config (hash {} vs {})",
                dir.display(),
                ckpt.config_hash,
                config.identity_hash()
            )));
        }
        let mut state = Self::fresh(config)?;
        let restore = |target: &mut ParamStore<T>, group: &str| -> CliResult<()> {
            let src = ckpt.group(group)?;
            if src.len() != target.len() {
                return Err(CliError::Io(format!(
                    "checkpoint {}: `{group}` holds {} arrays, model needs {}",
                    dir.display(),
                    src.len(),
                    target.len()
                )));
            }
            for (name, entry) in src.iter() {
                target.set_data(name, entry.tensor.to_vec())?;
            }
            Ok(())
        };
        restore(&mut state.params, "model")?;
        restore(&mut state.ema.shadow, "ema")?;
        restore(&mut state.optim.m, "adam_m")?;
        restore(&mut state.optim.v, "adam_v")?;
        state.step = ckpt.step;
        state.optim.step = ckpt.step;
        Ok(state)
    }
}

fn noise_like<T: Element>(z: &VideoLatent<T>, rng: &mut ChaCha8Rng) -> latte_core::Result<VideoLatent<T>> {
    let data = (0..z.shape().numel())
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    VideoLatent::from_vec(data, z.shape())
}

/// Losses for one batch, averaged over clips.
pub fn batch_loss<T: Element>(
    config: &RunConfig,
    schedule: &DiffusionSchedule,
    params: &ParamStore<T>,
    batch: &JointBatch<T>,
    step: u64,
) -> latte_core::Result<(Tensor<T>, f64, f64)> {
    let mut rng = step_rng(config.seed, step, STREAM_NOISE);
    let model = Denoiser::new(&config.model, params);
    let n = batch.latents.len() as f64;
    let (mut total, mut simple, mut vlb) = (None::<Tensor<T>>, 0.0, 0.0);
    for (z0, label) in batch.latents.iter().zip(&batch.labels) {
        let t = rng.gen_range(1..=schedule.steps());
        let eps = noise_like(z0, &mut rng)?;
        let out = training_losses(
            schedule,
            |z, t| {
                let c = Conditioning {
                    timestep: t,
                    class_label: *label,
                };
                model.forward(z, &c, Some(batch.temporal_valid))
            },
            z0,
            t,
            &eps,
            config.vlb_weight,
        )?;
        simple += out.simple / n;
        vlb += out.vlb / n;
        total = Some(match total {
            Some(acc) => acc.add(&out.total)?,
            None => out.total,
        });
    }
    let total = total.expect("batch_size > 0").scale(1.0 / n)?;
    Ok((total, simple, vlb))
}

pub fn checkpoint_dir(output: &Path, step: u64) -> PathBuf {
    output.join("checkpoints").join(format!("step_{step:06}"))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub start_step: u64,
    pub final_step: u64,
    pub final_checkpoint: PathBuf,
    pub metrics: Vec<MetricRow>,
}

fn spawn_producer<T: Element>(
    config: &RunConfig,
    source: ClipSource,
    steps: std::ops::RangeInclusive<u64>,
) -> (Receiver<latte_core::Result<JointBatch<T>>>, thread::JoinHandle<()>) {
    let (tx, rx) = sync_channel(QUEUE_DEPTH);
    let config = config.clone();
    let handle = thread::spawn(move || {
        for step in steps {
            let batch = make_batch::<T>(&config, &source, step);
            let failed = batch.is_err();
            // The receiver hangs up when training stops early.
            if tx.send(batch).is_err() || failed {
                return;
            }
        }
    });
    (rx, handle)
}

/// Runs `config.run.steps` total steps, resuming if `run.resume` is set.
pub fn train<T: Element>(config: &RunConfig) -> CliResult<TrainSummary> {
    config.validate()?;
    let out = &config.run.output_dir;
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    fs::write(out.join("config.json"), config.to_json())?;
    let schedule = DiffusionSchedule::from_config(&config.schedule)?;
    let mut state = match &config.run.resume {
        Some(dir) => TrainState::<T>::resume(config, dir)?,
        None => TrainState::<T>::fresh(config)?,
    };
    let start = state.step;
    let end = config.run.steps;
    if end < start {
        return Err(CliError::Config(format!(
            "run.steps {end} is behind the resumed checkpoint at step {start}"
        )));
    }
    let source = ClipSource::from_config(config)?;
    let mut metrics_file = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    writeln!(metrics_file, "{METRICS_HEADER}")?;
    let mut metrics = Vec::new();
    let clock = Instant::now();
    let (rx, producer) = spawn_producer::<T>(config, source, start + 1..=end);

    for step in start + 1..=end {
        let batch = rx
            .recv()
            .map_err(|_| CliError::Other("data producer stopped".into()))??;
        let (loss, l_simple, l_vlb) = batch_loss(config, &schedule, &state.params, &batch, step).map_err(|e| match e {
            Error::NonFinite { .. } => CliError::NonFinite { step },
            e => e.into(),
        })?;
        if !(l_simple.is_finite() && l_vlb.is_finite()) {
            return Err(CliError::NonFinite { step });
        }
        let grads = loss.backward().map_err(|e| match e {
            Error::NonFinite { .. } => CliError::NonFinite { step },
            e => e.into(),
        })?;
        state.optim.update(&mut state.params, &grads)?;
        state.ema.update(&state.params)?;
        state.step = step;
        if step % config.run.log_every == 0 {
            let row = MetricRow {
                step,
                l_simple,
                l_vlb,
                wall_ms: clock.elapsed().as_millis() as u64,
            };
            writeln!(metrics_file, "{}", row.csv())?;
            metrics.push(row);
        }
        let every = config.run.checkpoint_every;
        if every > 0 && step % every == 0 && step != end {
            state.to_checkpoint(config).save(&checkpoint_dir(out, step))?;
        }
    }
    drop(rx);
    let _ = producer.join();
    metrics_file.flush()?;
    let final_checkpoint = checkpoint_dir(out, state.step);
    state.to_checkpoint(config).save(&final_checkpoint)?;
    Ok(TrainSummary {
        start_step: start,
        final_step: state.step,
        final_checkpoint,
        metrics,
    })
}
