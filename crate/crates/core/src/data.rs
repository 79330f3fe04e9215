//! Synthetic videos, the lossless latent codec, clip extraction, flips,
//! joint image-video batches and PGM/PPM frame I/O.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{LatentShape, VideoLatent};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Pixel clip `[frames, height, width, channels]` with values on the 8-bit
/// grid `k/127.5 − 1`, `k ∈ 0..=255`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub class_label: Option<usize>,
}

/// Nearest 8-bit level of `v ∈ [−1, 1]`.
pub fn quantize(v: f64) -> f32 {
    level_value(to_level(v))
}

fn to_level(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn level_value(k: u8) -> f32 {
    (k as f64 / 127.5 - 1.0) as f32
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::invalid(format!(
                "clip {frames}x{height}x{width}x{channels}: extents must be positive and channels 1 or 3"
            )));
        }
        if data.len() != frames * height * width * channels {
            return Err(Error::shape(
                "video_clip",
                format!("{} values for {frames}x{height}x{width}x{channels}", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
            class_label: None,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    fn with_frames(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            data.extend_from_slice(self.frame(i));
        }
        Self {
            frames: indices.len(),
            data,
            ..self.clone()
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Moving-square video source. Class `k` moves along direction `2πk/K`, so
/// four classes move right, down, left and up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovingShapes {
    pub height: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default = "four")]
    pub num_classes: usize,
}

fn one() -> usize {
    1
}

fn four() -> usize {
    4
}

pub const MIN_EXTENT: usize = 8;

impl MovingShapes {
    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_EXTENT || self.width < MIN_EXTENT {
            return Err(Error::invalid(format!(
                "moving shapes need extents >= {MIN_EXTENT}, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(Error::invalid(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        Ok(())
    }

    /// Unit velocity direction `(dx, dy)` of a class.
    pub fn direction(&self, class: usize) -> (f64, f64) {
        let a = 2.0 * PI * class as f64 / self.num_classes as f64;
        (a.cos(), a.sin())
    }

    /// A clip whose class is drawn from the seed.
    pub fn clip(&self, seed: u64, frames: usize) -> Result<VideoClip> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let class = rng.gen_range(0..self.num_classes.max(1));
        self.render(&mut rng, frames, class)
    }

    pub fn clip_with_class(&self, seed: u64, frames: usize, class: usize) -> Result<VideoClip> {
        if class >= self.num_classes {
            return Err(Error::invalid(format!("class {class} >= {}", self.num_classes)));
        }
        self.render(&mut ChaCha8Rng::seed_from_u64(seed), frames, class)
    }

    fn render(&self, rng: &mut ChaCha8Rng, frames: usize, class: usize) -> Result<VideoClip> {
        self.validate()?;
        if frames == 0 {
            return Err(Error::invalid("a clip needs at least one frame"));
        }
        let (h, w) = (self.height as f64, self.width as f64);
        let side = rng.gen_range(0.25..0.4) * h.min(w);
        let (dx, dy) = self.direction(class);
        // travel fits inside the frame: slow down rather than leave it
        let room = (w - side).min(h - side) - 1.0;
        let span = (frames.saturating_sub(1)) as f64;
        let speed = if span > 0.0 {
            rng.gen_range(0.75..1.5f64).min(room / span)
        } else {
            0.0
        };
        let (tx, ty) = (dx * speed * span, dy * speed * span);
        let x_lo = (-tx).max(0.0);
        let x_hi = (w - side - tx).min(w - side);
        let y_lo = (-ty).max(0.0);
        let y_hi = (h - side - ty).min(h - side);
        let x0 = if x_hi > x_lo { rng.gen_range(x_lo..x_hi) } else { x_lo };
        let y0 = if y_hi > y_lo { rng.gen_range(y_lo..y_hi) } else { y_lo };
        let colour: Vec<f64> = (0..self.channels).map(|_| rng.gen_range(0.3..1.0)).collect();
        let background = rng.gen_range(-1.0..-0.6);

        let mut data = Vec::with_capacity(frames * self.height * self.width * self.channels);
        for f in 0..frames {
            let (left, top) = (x0 + dx * speed * f as f64, y0 + dy * speed * f as f64);
            for row in 0..self.height {
                let cy = overlap(row as f64, top, top + side);
                for col in 0..self.width {
                    // area coverage gives sub-pixel motion
                    let cover = cy * overlap(col as f64, left, left + side);
                    for &c in &colour {
                        data.push(quantize(background + cover * (c - background)));
                    }
                }
            }
        }
        let mut clip = VideoClip::new(frames, self.height, self.width, self.channels, data)?;
        clip.class_label = Some(class);
        Ok(clip)
    }
}

/// Length of `[p, p+1] ∩ [lo, hi]`.
fn overlap(p: f64, lo: f64, hi: f64) -> f64 {
    ((p + 1.0).min(hi) - p.max(lo)).max(0.0)
}

pub fn synth_moving_shapes(seed: u64, frames: usize, height: usize, width: usize, num_classes: usize) -> Result<VideoClip> {
    MovingShapes {
        height,
        width,
        channels: 1,
        num_classes,
    }
    .clip(seed, frames)
}

/// Number of source frames a clip of `frames` at `interval` spans.
pub fn clip_span(frames: usize, interval: usize) -> usize {
    1 + frames.saturating_sub(1) * interval
}

/// Frames `i₀, i₀+interval, …` with `i₀` uniform over every valid start.
pub fn clip_sample<R: Rng + ?Sized>(video: &VideoClip, interval: usize, frames: usize, rng: &mut R) -> Result<VideoClip> {
    if interval == 0 || frames == 0 {
        return Err(Error::invalid("interval and frame count must be positive"));
    }
    let span = clip_span(frames, interval);
    if video.frames < span {
        return Err(Error::invalid(format!(
            "source has {} frames, a {frames}-frame clip at interval {interval} needs {span}",
            video.frames
        )));
    }
    let start = rng.gen_range(0..=video.frames - span);
    let idx: Vec<usize> = (0..frames).map(|i| start + i * interval).collect();
    Ok(video.with_frames(&idx))
}

/// Flips every frame left to right with probability `p`; reports whether it
/// did.
pub fn hflip_augment<R: Rng + ?Sized>(clip: &VideoClip, p: f64, rng: &mut R) -> (VideoClip, bool) {
    if !(rng.gen::<f64>() < p) {
        return (clip.clone(), false);
    }
    let (w, c) = (clip.width, clip.channels);
    let mut out = clip.clone();
    for (src, dst) in clip.data.chunks(w * c).zip(out.data.chunks_mut(w * c)) {
        for x in 0..w {
            dst[x * c..(x + 1) * c].copy_from_slice(&src[(w - 1 - x) * c..(w - x) * c]);
        }
    }
    (out, true)
}

/// Lossless space-to-depth codec standing in for a learned autoencoder.
/// A `factor`×`factor` pixel block becomes one latent position with
/// `factor²·C` channels ordered `(dy, dx, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Codec {
    pub factor: usize,
}

impl Default for Codec {
    fn default() -> Self {
        Self { factor: 8 }
    }
}

impl Codec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("codec factor must be positive"));
        }
        Ok(Self { factor })
    }

    pub fn latent_shape(&self, frames: usize, height: usize, width: usize, channels: usize) -> Result<LatentShape> {
        let f = self.factor;
        if f == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(Error::invalid(format!(
                "{height}x{width} pixels not divisible by codec factor {f}"
            )));
        }
        Ok(LatentShape::new(frames, height / f, width / f, f * f * channels))
    }

    pub fn encode<T: Element>(&self, clip: &VideoClip) -> Result<VideoLatent<T>> {
        let shape = self.latent_shape(clip.frames, clip.height, clip.width, clip.channels)?;
        let f = self.factor;
        let c = clip.channels;
        let mut out = Vec::with_capacity(shape.numel());
        for fr in 0..clip.frames {
            let frame = clip.frame(fr);
            for by in 0..shape.height {
                for bx in 0..shape.width {
                    for dy in 0..f {
                        let row = (by * f + dy) * clip.width;
                        for dx in 0..f {
                            let at = (row + bx * f + dx) * c;
                            out.extend(frame[at..at + c].iter().map(|&v| T::from_f64(v as f64)));
                        }
                    }
                }
            }
        }
        VideoLatent::from_vec(out, shape)
    }

    /// Inverse of [`encode`](Self::encode). Values are written back on the
    /// pixel grid as stored; no clamping.
    pub fn decode<T: Element>(&self, latent: &VideoLatent<T>) -> Result<VideoClip> {
        let s = latent.shape();
        let f = self.factor;
        if f == 0 || !s.channels.is_multiple_of(f * f) {
            return Err(Error::invalid(format!(
                "{} latent channels not a multiple of factor² = {}",
                s.channels,
                f * f
            )));
        }
        let c = s.channels / (f * f);
        let (h, w) = (s.height * f, s.width * f);
        let src = latent.tensor().data();
        let mut data = vec![0f32; s.frames * h * w * c];
        let mut i = 0;
        for fr in 0..s.frames {
            for by in 0..s.height {
                for bx in 0..s.width {
                    for dy in 0..f {
                        for dx in 0..f {
                            let at = ((fr * h + by * f + dy) * w + bx * f + dx) * c;
                            for ch in 0..c {
                                data[at + ch] = src[i].to_f64() as f32;
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(VideoClip {
            frames: s.frames,
            height: h,
            width: w,
            channels: c,
            data,
            class_label: None,
        })
    }

    /// Decodes a generated latent and snaps it onto the 8-bit pixel grid.
    pub fn decode_to_pixels<T: Element>(&self, latent: &VideoLatent<T>) -> Result<VideoClip> {
        let mut clip = self.decode(latent)?;
        for v in clip.data.iter_mut() {
            *v = quantize(*v as f64);
        }
        Ok(clip)
    }
}

/// Video frames followed by independently drawn image frames; only the
/// first `temporal_valid` frames take part in temporal modelling.
#[derive(Debug, Clone)]
pub struct JointBatch<T: Element> {
    pub latents: Vec<VideoLatent<T>>,
    pub labels: Vec<Option<usize>>,
    pub temporal_valid: usize,
}

/// Appends `extra_images` frames to every clip, each drawn uniformly from
/// a uniformly chosen clip of `pool`.
pub fn build_joint_batch<T: Element, R: Rng + ?Sized>(
    clips: &[(VideoLatent<T>, Option<usize>)],
    pool: &[VideoLatent<T>],
    extra_images: usize,
    rng: &mut R,
) -> Result<JointBatch<T>> {
    let first = clips.first().ok_or_else(|| Error::invalid("joint batch needs at least one clip"))?.0.shape();
    if extra_images > 0 && pool.is_empty() {
        return Err(Error::invalid("appending image frames needs a non-empty pool"));
    }
    let frame_shape = |s: LatentShape| (s.height, s.width, s.channels);
    for (v, _) in clips {
        if v.shape() != first {
            return Err(Error::shape("build_joint_batch", format!("{:?} vs {:?}", v.shape(), first)));
        }
    }
    for p in pool {
        if frame_shape(p.shape()) != frame_shape(first) {
            return Err(Error::shape(
                "build_joint_batch",
                format!("pool frame {:?} vs clip frame {:?}", p.shape(), first),
            ));
        }
    }
    let per_frame = first.height * first.width * first.channels;
    let mut latents = Vec::with_capacity(clips.len());
    let mut labels = Vec::with_capacity(clips.len());
    for (v, label) in clips {
        let mut data = v.tensor().to_vec();
        for _ in 0..extra_images {
            let src = &pool[rng.gen_range(0..pool.len())];
            let f = rng.gen_range(0..src.shape().frames);
            data.extend_from_slice(&src.tensor().data()[f * per_frame..(f + 1) * per_frame]);
        }
        let shape = LatentShape {
            frames: first.frames + extra_images,
            ..first
        };
        latents.push(VideoLatent::new(Tensor::from_vec(data, &shape.dims())?)?);
        labels.push(*label);
    }
    Ok(JointBatch {
        latents,
        labels,
        temporal_valid: first.frames,
    })
}

/// Writes one frame as binary PGM (1 channel) or PPM (3 channels).
pub fn write_pnm(path: &Path, width: usize, height: usize, channels: usize, pixels: &[f32]) -> Result<()> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::invalid(format!("cannot write {channels}-channel frames"))),
    };
    if pixels.len() != width * height * channels {
        return Err(Error::shape("write_pnm", format!("{} values for {width}x{height}x{channels}", pixels.len())));
    }
    let mut out = Vec::with_capacity(pixels.len() + 20);
    write!(out, "{magic}\n{width} {height}\n255\n")?;
    out.extend(pixels.iter().map(|&v| to_level(v as f64)));
    fs::write(path, out)?;
    Ok(())
}

/// Reads a binary PGM/PPM with maxval 255. Returns `(width, height,
/// channels, pixels)`.
pub fn read_pnm(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::invalid(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte before the raster
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported format {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header field `{s}`")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit files (maxval 255) are supported"));
    }
    let n = width * height * channels;
    let raster = bytes.get(pos..pos + n).ok_or_else(|| bad("raster shorter than header claims"))?;
    Ok((width, height, channels, raster.iter().map(|&k| level_value(k)).collect()))
}

/// Writes `frame_0000.pgm`, … into `dir`.
pub fn write_clip_frames(dir: &Path, clip: &VideoClip) -> Result<()> {
    fs::create_dir_all(dir)?;
    let ext = if clip.channels == 1 { "pgm" } else { "ppm" };
    for f in 0..clip.frames {
        write_pnm(
            &dir.join(format!("frame_{f:04}.{ext}")),
            clip.width,
            clip.height,
            clip.channels,
            clip.frame(f),
        )?;
    }
    Ok(())
}

fn is_frame_file(p: &Path) -> bool {
    p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm"))
}

/// One video from a directory of frames, lexicographic order = time order.
pub fn read_clip_dir(dir: &Path) -> Result<VideoClip> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_frame_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("{}: no PGM/PPM frames", dir.display())));
    }
    let mut data = Vec::new();
    let mut dims = None;
    for f in &files {
        let (w, h, c, px) = read_pnm(f)?;
        match dims {
            None => dims = Some((w, h, c)),
            Some(d) if d != (w, h, c) => {
                return Err(Error::invalid(format!(
                    "{}: frame is {w}x{h}x{c}, earlier frames {d:?}",
                    f.display()
                )))
            }
            _ => {}
        }
        data.extend(px);
    }
    let (w, h, c) = dims.expect("at least one frame");
    VideoClip::new(files.len(), h, w, c, data)
}

/// Videos under `root`: each subdirectory holding frames is one video, or
/// `root` itself when it holds frames directly.
pub fn import_videos(root: &Path) -> Result<Vec<VideoClip>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut videos = Vec::new();
    for d in dirs {
        if fs::read_dir(&d)?.filter_map(|e| e.ok()).any(|e| is_frame_file(&e.path())) {
            videos.push(read_clip_dir(&d)?);
        }
    }
    if videos.is_empty() {
        videos.push(read_clip_dir(root)?);
    }
    Ok(videos)
}
