//! Closed-form parameter and FLOP accounting, Fréchet distance between
//! Gaussian feature statistics, and a temporal-coherence statistic.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::backbone::{BlockKind, CondMode, LatteSize, ModelConfig, Variant};
use crate::embedding::{PatchMode, TIMESTEP_FREQ_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: u8,
    pub layers: usize,
    pub params: u64,
    /// Forward FLOPs for one clip, one multiply-add counted as 2.
    pub flops_forward: u64,
    pub breakdown: Vec<Component>,
}

impl CostReport {
    pub fn component(&self, name: &str) -> Option<&Component> {
        self.breakdown.iter().find(|c| c.name == name)
    }
}

/// FLOPs of a dense `m → n` map applied to `tokens` rows.
fn linear_flops(tokens: u64, m: u64, n: u64) -> u64 {
    2 * tokens * m * n
}

fn linear_params(m: u64, n: u64) -> u64 {
    m * n + n
}

/// Scores and mixing for `seqs` sequences with `q` queries, `k` keys and
/// total head width `d`.
fn attention_core_flops(seqs: u64, q: u64, k: u64, d: u64) -> u64 {
    2 * (2 * seqs * q * k * d)
}

struct Acc {
    parts: Vec<Component>,
}

impl Acc {
    fn add(&mut self, name: &str, params: u64, flops: u64) {
        match self.parts.iter_mut().find(|c| c.name == name) {
            Some(c) => {
                c.params += params;
                c.flops += flops;
            }
            None => self.parts.push(Component {
                name: name.to_string(),
                params,
                flops,
            }),
        }
    }
}

/// Parameter count and forward FLOPs for one clip of `config.frames` frames.
pub fn estimate_flops(config: &ModelConfig) -> Result<CostReport> {
    config.validate()?;
    let d = config.hidden as u64;
    let r = config.mlp_ratio as u64;
    let (nf, nh, nw) = config.grid();
    let (nf, t) = (nf as u64, (nh * nw) as u64);
    let tokens = nf * t;
    let extra = u64::from(config.cond_mode == CondMode::AllTokens);
    let mut acc = Acc { parts: Vec::new() };

    let pd = config.patch_dim() as u64;
    acc.add("patch_embed", linear_params(pd, d), linear_flops(tokens, pd, d));
    let f = TIMESTEP_FREQ_DIM as u64;
    acc.add(
        "timestep_embed",
        linear_params(f, d) + linear_params(d, d),
        linear_flops(1, f, d) + linear_flops(1, d, d),
    );
    if let Some(k) = config.num_classes {
        acc.add("class_embed", k as u64 * d, 0);
    }

    let attn_params = 4 * linear_params(d, d);
    // q and o on every query token, k and v on every key token (including
    // the shared conditioning token once per sequence)
    let proj = |q_tokens: u64, seqs: u64| 2 * linear_flops(q_tokens, d, d) + 2 * linear_flops(q_tokens + extra * seqs, d, d);
    let spatial = |acc: &mut Acc| {
        acc.add("attention_proj", attn_params, proj(tokens, nf));
        acc.add("attention_core", 0, attention_core_flops(nf, t, t + extra, d));
    };
    let temporal = |acc: &mut Acc| {
        acc.add("attention_proj", attn_params, proj(tokens, t));
        acc.add("attention_core", 0, attention_core_flops(t, nf, nf + extra, d));
    };
    for kind in config.block_plan() {
        match kind {
            BlockKind::Spatial => spatial(&mut acc),
            BlockKind::Temporal => temporal(&mut acc),
            BlockKind::Sequential => {
                spatial(&mut acc);
                temporal(&mut acc);
            }
            BlockKind::SplitHead => {
                // the conditioning key/value is projected once for both halves
                acc.add("attention_proj", attn_params, proj(tokens, 1));
                acc.add(
                    "attention_core",
                    0,
                    attention_core_flops(nf, t, t + extra, d / 2) + attention_core_flops(t, nf, nf + extra, d / 2),
                );
            }
        }
        acc.add(
            "mlp",
            linear_params(d, r * d) + linear_params(r * d, d),
            linear_flops(tokens, d, r * d) + linear_flops(tokens, r * d, d),
        );
        match config.cond_mode {
            CondMode::SAdaln => acc.add("modulation", 3 * linear_params(d, 2 * d), 3 * linear_flops(1, d, 2 * d)),
            CondMode::AllTokens => {
                let norms = if kind == BlockKind::Sequential { 3 } else { 2 };
                acc.add("modulation", norms * 2 * d, 0);
            }
        }
    }

    let dec = config.decode_dim() as u64;
    match config.cond_mode {
        CondMode::SAdaln => acc.add("final", 2 * linear_params(d, d), 2 * linear_flops(1, d, d)),
        CondMode::AllTokens => acc.add("final", 2 * d, 0),
    }
    acc.add("final", linear_params(d, dec), linear_flops(tokens, d, dec));
    if let PatchMode::Compression { stride } = config.patch_mode {
        let k = 2 * config.latent_channels as u64;
        let s = stride as u64;
        let pixels = (config.latent_height * config.latent_width) as u64;
        acc.add("final", s * k * k + k, linear_flops(nf * s * pixels, k, k));
    }

    let params = acc.parts.iter().map(|c| c.params).sum();
    let flops_forward = acc.parts.iter().map(|c| c.flops).sum();
    Ok(CostReport {
        variant: config.variant.id(),
        layers: config.layers,
        params,
        flops_forward,
        breakdown: acc.parts,
    })
}

/// Trainable parameter count, without allocating any weights.
pub fn count_params(config: &ModelConfig) -> Result<u64> {
    Ok(estimate_flops(config)?.params)
}

/// Smallest depth at which `variant` has at least the parameters of an
/// `n`-block interleaved model of the same width. Variants whose blocks are
/// as large as an interleaved block keep `n`.
pub fn equalized_layers(config: &ModelConfig, variant: Variant) -> Result<usize> {
    let mut base = config.clone();
    base.variant = Variant::Interleaved;
    let target = count_params(&base)?;
    let mut c = config.clone();
    c.variant = variant;
    if matches!(variant, Variant::Interleaved | Variant::LateFusion | Variant::SplitHead) {
        return Ok(config.layers);
    }
    for layers in 1..=config.layers {
        c.layers = layers;
        if c.validate().is_ok() && count_params(&c)? >= target {
            return Ok(layers);
        }
    }
    Ok(config.layers)
}

/// Size preset with depth equalized to the interleaved model of that size.
pub fn size_preset(size: LatteSize, variant: Variant) -> Result<ModelConfig> {
    let mut c = ModelConfig::latte(size, variant);
    c.layers = equalized_layers(&c, variant)?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        let n = mean.len();
        if cov.len() != n * n {
            return Err(Error::shape("gaussian_stats", format!("{n}-dim mean with {} covariance entries", cov.len())));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov: DMatrix::from_row_slice(n, n, &cov),
            count,
        })
    }

    /// Mean and unbiased covariance of row-major samples `[n, dim]`.
    pub fn from_samples(samples: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || !samples.len().is_multiple_of(dim) || samples.len() / dim < 2 {
            return Err(Error::invalid("need at least two samples of positive dimension"));
        }
        let n = samples.len() / dim;
        let x = DMatrix::from_row_slice(n, dim, samples);
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Eigenvalues below this are an error; those in `[-tol, 0)` clamp to 0.
pub const PSD_TOLERANCE: f64 = 1e-8;

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_TOLERANCE {
            return Err(Error::invalid(format!("covariance is indefinite (eigenvalue {v:e})")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½)`, with the trace of the cross term
/// taken from the eigenvalues of the symmetric `Σa^½ Σb Σa^½`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != (a.dim(), a.dim()) || b.cov.shape() != (b.dim(), b.dim()) {
        return Err(Error::shape(
            "frechet_distance",
            format!("dimensions {} and {}", a.dim(), b.dim()),
        ));
    }
    let sa = psd_sqrt(&a.cov)?;
    psd_sqrt(&b.cov)?;
    let inner = &sa * &b.cov * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let mut cross = 0.0;
    for v in SymmetricEigen::new(inner).eigenvalues.iter() {
        if *v < -PSD_TOLERANCE {
            return Err(Error::invalid(format!("cross term is indefinite (eigenvalue {v:e})")));
        }
        cross += v.max(0.0).sqrt();
    }
    let dm = &a.mean - &b.mean;
    Ok(dm.dot(&dm) + a.cov.trace() + b.cov.trace() - 2.0 * cross)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return (a == b).then_some(1.0);
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Mean Pearson correlation between consecutive frames of a clip stored
/// frame-major. A pair with a constant frame counts as 1 when both frames
/// are identical and is skipped otherwise; a clip with every pair skipped
/// scores 0.
pub fn temporal_coherence(clip: &[f64], frames: usize) -> Result<f64> {
    if frames < 2 || clip.is_empty() || !clip.len().is_multiple_of(frames) {
        return Err(Error::invalid(format!(
            "temporal coherence needs at least two equal frames, got {frames} over {} values",
            clip.len()
        )));
    }
    let per = clip.len() / frames;
    let rs: Vec<f64> = (0..frames - 1)
        .filter_map(|f| pearson(&clip[f * per..(f + 1) * per], &clip[(f + 1) * per..(f + 2) * per]))
        .collect();
    if rs.is_empty() {
        return Ok(0.0);
    }
    Ok(rs.iter().sum::<f64>() / rs.len() as f64)
}
