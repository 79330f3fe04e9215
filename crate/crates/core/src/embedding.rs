//! Latent clip tokenization, positional tables, timestep/class conditioning
//! and the token decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{linear, ParamStore};
use crate::tensor::{Element, Tensor};

/// A latent clip, `[frames, height, width, channels]`.
#[derive(Clone, Debug)]
pub struct VideoLatent<T: Element>(Tensor<T>);

impl<T: Element> VideoLatent<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.rank() != 4 {
            return Err(Error::shape(
                "video_latent",
                format!("expected [F,H,W,C], got {:?}", tensor.shape()),
            ));
        }
        Ok(Self(tensor))
    }

    pub fn from_vec(data: Vec<T>, shape: LatentShape) -> Result<Self> {
        Self::new(Tensor::from_vec(data, &shape.dims())?)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn shape(&self) -> LatentShape {
        let s = self.0.shape();
        LatentShape {
            frames: s[0],
            height: s[1],
            width: s[2],
            channels: s[3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LatentShape {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn numel(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PatchMode {
    Uniform,
    Compression { stride: usize },
}

impl PatchMode {
    pub fn stride(&self) -> usize {
        match self {
            PatchMode::Uniform => 1,
            PatchMode::Compression { stride } => *stride,
        }
    }
}

/// Tokens laid out `[n_f, n_h·n_w, d]`.
#[derive(Clone, Debug)]
pub struct TokenGrid<T: Element> {
    pub n_f: usize,
    pub n_h: usize,
    pub n_w: usize,
    pub tokens: Tensor<T>,
    pub mode: PatchMode,
}

impl<T: Element> TokenGrid<T> {
    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn len(&self) -> usize {
        self.n_f * self.n_h * self.n_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditioning {
    pub timestep: usize,
    pub class_label: Option<usize>,
}

impl Conditioning {
    pub fn unconditional(timestep: usize) -> Self {
        Self {
            timestep,
            class_label: None,
        }
    }
}

fn check_spatial(shape: LatentShape, ph: usize, pw: usize) -> Result<()> {
    if ph == 0 || pw == 0 || !shape.height.is_multiple_of(ph) || !shape.width.is_multiple_of(pw) {
        return Err(Error::shape(
            "patch_embed",
            format!(
                "{}x{} latent is not divisible into {ph}x{pw} patches",
                shape.height, shape.width
            ),
        ));
    }
    Ok(())
}

/// `[F,H,W,C]` → `[F/s, (H/h)(W/w), s·h·w·C]`, each row one flattened tube.
pub fn patchify<T: Element>(v: &VideoLatent<T>, ph: usize, pw: usize, stride: usize) -> Result<Tensor<T>> {
    let shape = v.shape();
    check_spatial(shape, ph, pw)?;
    if stride == 0 || !shape.frames.is_multiple_of(stride) {
        return Err(Error::shape(
            "compression_patch_embed",
            format!("{} frames not divisible by stride {stride}", shape.frames),
        ));
    }
    let (nf, nh, nw) = (shape.frames / stride, shape.height / ph, shape.width / pw);
    let c = shape.channels;
    v.tensor()
        .reshape(&[nf, stride, nh, ph, nw, pw, c])?
        .permute(&[0, 2, 4, 1, 3, 5, 6])?
        .reshape(&[nf, nh * nw, stride * ph * pw * c])
}

/// Inverse of [`patchify`] for `stride = 1`: `[n_f, n_h·n_w, h·w·K]` → `[n_f, H, W, K]`.
pub fn unpatchify<T: Element>(x: &Tensor<T>, n_h: usize, n_w: usize, ph: usize, pw: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != n_h * n_w || !s[2].is_multiple_of(ph * pw) {
        return Err(Error::shape(
            "token_decode",
            format!("{s:?} does not hold a {n_h}x{n_w} grid of {ph}x{pw} patches"),
        ));
    }
    let k = s[2] / (ph * pw);
    x.reshape(&[s[0], n_h, n_w, ph, pw, k])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[s[0], n_h * ph, n_w * pw, k])
}

/// Per-frame ViT patch embedding through the linear map `{prefix}`.
pub fn uniform_patch_embed<T: Element>(
    v: &VideoLatent<T>,
    ph: usize,
    pw: usize,
    store: &ParamStore<T>,
    prefix: &str,
) -> Result<TokenGrid<T>> {
    let shape = v.shape();
    let patches = patchify(v, ph, pw, 1)?;
    Ok(TokenGrid {
        n_f: shape.frames,
        n_h: shape.height / ph,
        n_w: shape.width / pw,
        tokens: linear(&patches, store, prefix)?,
        mode: PatchMode::Uniform,
    })
}

/// Tube embedding with temporal stride `s` through the linear map `{prefix}`.
pub fn compression_patch_embed<T: Element>(
    v: &VideoLatent<T>,
    ph: usize,
    pw: usize,
    stride: usize,
    store: &ParamStore<T>,
    prefix: &str,
) -> Result<TokenGrid<T>> {
    let shape = v.shape();
    let tubes = patchify(v, ph, pw, stride)?;
    Ok(TokenGrid {
        n_f: shape.frames / stride,
        n_h: shape.height / ph,
        n_w: shape.width / pw,
        tokens: linear(&tubes, store, prefix)?,
        mode: PatchMode::Compression { stride },
    })
}

/// 1-D sinusoidal code of length `dim`: `[sin(p·ω_i) | cos(p·ω_i)]` with
/// `ω_i = 10000^(-i/(dim/2))`. An odd trailing slot stays zero.
pub fn sincos_1d(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let omega = 10_000f64.powf(-(i as f64) / half as f64);
        out[i] = (position * omega).sin();
        out[half + i] = (position * omega).cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalPos {
    Absolute,
    Rope,
}

/// Additive table `[(n_f·n_h·n_w), d]` plus, in rope mode, the frame
/// indices temporal attention rotates by.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTable {
    pub n_f: usize,
    pub n_h: usize,
    pub n_w: usize,
    pub dim: usize,
    pub additive: Vec<f64>,
    pub temporal_positions: Option<Vec<usize>>,
}

/// Spatial part: 2-D sinusoid over `(row, col)` in the first `d/2` dims.
/// Temporal part: 1-D sinusoid over the frame index in the last `d/2` dims
/// (absolute mode) or left zero with rotary positions returned (rope mode).
pub fn positional_embedding(n_f: usize, n_h: usize, n_w: usize, d: usize, mode: TemporalPos) -> Result<PositionalTable> {
    if !d.is_multiple_of(4) || d == 0 {
        return Err(Error::shape(
            "positional_embedding",
            format!("dim {d} is not divisible by 4"),
        ));
    }
    let half = d / 2;
    let quarter = d / 4;
    let mut additive = vec![0.0; n_f * n_h * n_w * d];
    for f in 0..n_f {
        let temporal = match mode {
            TemporalPos::Absolute => sincos_1d(f as f64, half),
            TemporalPos::Rope => vec![0.0; half],
        };
        for r in 0..n_h {
            let row = sincos_1d(r as f64, quarter);
            for c in 0..n_w {
                let col = sincos_1d(c as f64, quarter);
                let base = ((f * n_h + r) * n_w + c) * d;
                let slot = &mut additive[base..base + d];
                slot[..quarter].copy_from_slice(&row);
                slot[quarter..half].copy_from_slice(&col);
                slot[half..].copy_from_slice(&temporal);
            }
        }
    }
    Ok(PositionalTable {
        n_f,
        n_h,
        n_w,
        dim: d,
        additive,
        temporal_positions: match mode {
            TemporalPos::Absolute => None,
            TemporalPos::Rope => Some((0..n_f).collect()),
        },
    })
}

/// Rotates a single vector of even length by `position` with the rotary
/// frequencies used in temporal attention.
pub fn rope_rotate(v: &[f64], position: usize) -> Vec<f64> {
    let d = v.len();
    let mut out = v.to_vec();
    for j in 0..d / 2 {
        let theta = crate::attention::ROPE_BASE.powf(-2.0 * j as f64 / d as f64);
        let (s, c) = (position as f64 * theta).sin_cos();
        out[2 * j] = v[2 * j] * c - v[2 * j + 1] * s;
        out[2 * j + 1] = v[2 * j] * s + v[2 * j + 1] * c;
    }
    out
}

/// Frequency dimension of the timestep sinusoid fed to the timestep MLP.
pub const TIMESTEP_FREQ_DIM: usize = 256;

/// Timestep code `[sin(t·ω_i) | cos(t·ω_i)]`, `ω_i = 10000^(-i/(dim/2))`.
pub fn timestep_sinusoid(t: usize, dim: usize) -> Vec<f64> {
    sincos_1d(t as f64, dim)
}

/// Conditioning vector `[d]`: `MLP(sinusoid(t))` plus the class row (none
/// when unconditional). Parameters: `t_embed.fc1`, `t_embed.fc2`,
/// `y_embed.table` (optional).
pub fn timestep_class_embed<T: Element>(c: &Conditioning, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let fc1 = store.get("t_embed.fc1.weight")?;
    let freq = fc1.shape()[0];
    let code = Tensor::<T>::from_f64_slice(&timestep_sinusoid(c.timestep, freq), &[1, freq])?;
    let h = linear(&code, store, "t_embed.fc1")?.silu()?;
    let t_emb = linear(&h, store, "t_embed.fc2")?;
    let d = t_emb.shape()[1];
    let t_emb = t_emb.reshape(&[d])?;
    match (c.class_label, store.entry("y_embed.table")) {
        (None, _) => Ok(t_emb),
        (Some(label), Some(table)) => {
            let classes = table.tensor.shape()[0];
            if label >= classes {
                return Err(Error::invalid(format!(
                    "class label {label} out of range for {classes} classes"
                )));
            }
            let row = table.tensor.narrow(0, label, 1)?.reshape(&[d])?;
            t_emb.add(&row)
        }
        (Some(label), None) => Err(Error::invalid(format!(
            "class label {label} given to an unconditional model"
        ))),
    }
}

/// Linear decoder: each token maps to `h·w·2C` values, reshaped onto the
/// latent grid and split into `(noise, variance)`. With a compression grid the
/// `n_f` decoded frames go through the temporal transposed convolution
/// `{prefix}.upsample` to reach `target.frames`.
pub fn token_decode<T: Element>(
    grid: &TokenGrid<T>,
    target: LatentShape,
    ph: usize,
    pw: usize,
    store: &ParamStore<T>,
    prefix: &str,
) -> Result<(VideoLatent<T>, VideoLatent<T>)> {
    let stride = grid.mode.stride();
    if grid.n_f * stride != target.frames
        || grid.n_h * ph != target.height
        || grid.n_w * pw != target.width
    {
        return Err(Error::shape(
            "token_decode",
            format!(
                "{}x{}x{} grid (stride {stride}, patch {ph}x{pw}) cannot produce {:?}",
                grid.n_f,
                grid.n_h,
                grid.n_w,
                target.dims()
            ),
        ));
    }
    let out = linear(&grid.tokens, store, &format!("{prefix}.linear"))?;
    let expected = ph * pw * 2 * target.channels;
    if out.shape()[2] != expected {
        return Err(Error::shape(
            "token_decode",
            format!("decoder width {} != h·w·2C = {expected}", out.shape()[2]),
        ));
    }
    let mut frames = unpatchify(&out, grid.n_h, grid.n_w, ph, pw)?;
    if let PatchMode::Compression { stride } = grid.mode {
        frames = temporal_upsample(&frames, stride, store, &format!("{prefix}.upsample"))?;
    }
    let c = target.channels;
    let eps = frames.narrow(3, 0, c)?;
    let var = frames.narrow(3, c, c)?;
    Ok((VideoLatent::new(eps)?, VideoLatent::new(var)?))
}

/// Transposed convolution along time with kernel = stride = `s` and 1×1
/// spatial extent: output frame `f·s + k` is `x[f] · W[k] + b`.
pub fn temporal_upsample<T: Element>(x: &Tensor<T>, stride: usize, store: &ParamStore<T>, prefix: &str) -> Result<Tensor<T>> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let b = store.get(&format!("{prefix}.bias"))?;
    let s = x.shape();
    let (nf, h, wd, k) = (s[0], s[1], s[2], s[3]);
    if w.shape() != [stride, k, k] {
        return Err(Error::shape(
            "temporal_upsample",
            format!("kernel {:?} for stride {stride} and {k} channels", w.shape()),
        ));
    }
    let mut taps = Vec::with_capacity(stride);
    for tap in 0..stride {
        let wk = w.narrow(0, tap, 1)?.reshape(&[k, k])?;
        taps.push(x.matmul(&wk)?.reshape(&[nf, 1, h * wd * k])?);
    }
    Tensor::concat(&taps, 1)?
        .reshape(&[nf * stride, h, wd, k])?
        .add(b)
}
