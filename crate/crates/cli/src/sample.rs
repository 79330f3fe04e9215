use std::fs;
use std::path::{Path, PathBuf};

use latte_core::analysis::temporal_coherence;
use latte_core::backbone::Denoiser;
use latte_core::checkpoint::Checkpoint;
use latte_core::data::write_clip_frames;
use latte_core::diffusion::{p_sample_loop, DiffusionSchedule};
use latte_core::embedding::Conditioning;
use latte_core::tensor::Element;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    pub class_label: Option<usize>,
    pub dir: String,
    pub temporal_coherence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub checkpoint: PathBuf,
    pub step: u64,
    pub weights: String,
    pub samples: Vec<SampleRecord>,
    pub mean_temporal_coherence: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub ckpt: PathBuf,
    pub count: usize,
    pub seed: u64,
    /// Defaults to `<ckpt>/samples`.
    pub out: Option<PathBuf>,
    /// Use the raw weights instead of the EMA copy.
    pub raw: bool,
}

/// Draws `count` clips, sample `i` from seed `seed + i`, and writes each as
/// a frame directory next to a JSON coherence report.
pub fn sample<T: Element>(args: &SampleArgs) -> CliResult<SampleReport> {
    if !args.ckpt.join(latte_core::checkpoint::MANIFEST).is_file() {
        return Err(CliError::Io(format!("no checkpoint at {}", args.ckpt.display())));
    }
    let ckpt = Checkpoint::<T>::load(&args.ckpt)?;
    let config = RunConfig::from_identity(&ckpt.config)?;
    let group = if args.raw { "model" } else { "ema" };
    let store = ckpt.group(group)?.frozen();
    let schedule = DiffusionSchedule::from_config(&config.schedule)?;
    let codec = config.dataset.codec()?;
    let model = Denoiser::new(&config.model, &store);
    let out = args.out.clone().unwrap_or_else(|| args.ckpt.join("samples"));
    fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;

    let mut samples = Vec::with_capacity(args.count);
    for index in 0..args.count {
        let seed = args.seed.wrapping_add(index as u64);
        let class_label = config.model.num_classes.map(|k| index % k);
        let z = p_sample_loop(
            &schedule,
            |z, t| {
                let c = Conditioning {
                    timestep: t,
                    class_label,
                };
                model.forward(z, &c, None)
            },
            config.latent_shape(),
            seed,
        )?;
        let clip = codec.decode_to_pixels(&z)?;
        let name = format!("sample_{index}");
        write_clip_frames(&out.join(&name), &clip)?;
        samples.push(SampleRecord {
            index,
            seed,
            class_label,
            dir: name,
            temporal_coherence: temporal_coherence(&clip.as_f64(), clip.frames)?,
        });
    }
    let mean = (!samples.is_empty())
        .then(|| samples.iter().map(|s| s.temporal_coherence).sum::<f64>() / samples.len() as f64);
    let report = SampleReport {
        checkpoint: args.ckpt.clone(),
        step: ckpt.step,
        weights: group.to_string(),
        samples,
        mean_temporal_coherence: mean,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(out.join(REPORT_FILE), text)?;
    Ok(report)
}

pub fn read_report(path: &Path) -> CliResult<SampleReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}
