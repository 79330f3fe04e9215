use std::cell::RefCell;

use super::config::{BlockKind, CondMode, ModelConfig, LN_EPS};
use crate::attention::{attention_core, AttentionOptions, RopePositions};
use crate::embedding::{
    compression_patch_embed, timestep_class_embed, token_decode, uniform_patch_embed, Conditioning, PatchMode,
    TemporalPos, TokenGrid, VideoLatent,
};
use crate::error::{Error, Result};
use crate::params::{linear, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnRole {
    Spatial,
    Temporal,
}

/// Attention weights `[B,H,Sq,Sk]` seen by one attention call.
#[derive(Debug, Clone)]
pub struct AttnRecord<T: Element> {
    pub block: usize,
    pub role: AttnRole,
    pub probs: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sub {
    Attn,
    /// Temporal attention of a sequential block; shares the first
    /// modulation triple with `Attn`.
    AttnT,
    Mlp,
}

impl Sub {
    fn chunk(self) -> usize {
        match self {
            Sub::Attn | Sub::AttnT => 0,
            Sub::Mlp => 1,
        }
    }

    fn norm(self) -> &'static str {
        match self {
            Sub::Attn => "norm1",
            Sub::AttnT => "norm_t",
            Sub::Mlp => "norm2",
        }
    }
}

enum Modulation<T: Element> {
    Ada {
        shift: Tensor<T>,
        scale: Tensor<T>,
        gate: Tensor<T>,
    },
    Tokens {
        prefix: String,
    },
}

/// Denoiser over a parameter store. Temporal validity is counted in token
/// frames: the first `valid` frames take part in temporal attention and
/// later (appended) frames are only seen by spatial computation.
pub struct Denoiser<'a, T: Element> {
    config: &'a ModelConfig,
    store: &'a ParamStore<T>,
    trace: Option<RefCell<Vec<AttnRecord<T>>>>,
}

impl<'a, T: Element> Denoiser<'a, T> {
    pub fn new(config: &'a ModelConfig, store: &'a ParamStore<T>) -> Self {
        Self {
            config,
            store,
            trace: None,
        }
    }

    /// Same model, additionally recording every attention weight tensor.
    pub fn traced(config: &'a ModelConfig, store: &'a ParamStore<T>) -> Self {
        Self {
            config,
            store,
            trace: Some(RefCell::new(Vec::new())),
        }
    }

    pub fn take_trace(&self) -> Vec<AttnRecord<T>> {
        self.trace.as_ref().map(|t| t.take()).unwrap_or_default()
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    fn d(&self) -> usize {
        self.config.hidden
    }

    /// Noise prediction and raw variance output, both shaped like `v`.
    pub fn forward(
        &self,
        v: &VideoLatent<T>,
        c: &Conditioning,
        temporal_valid: Option<usize>,
    ) -> Result<(VideoLatent<T>, VideoLatent<T>)> {
        let valid = self.valid_token_frames(v, temporal_valid)?;
        let grid = self.embed(v, valid)?;
        let cond = self.condition(c)?;
        let x = self.blocks(&grid.tokens, &cond, valid)?;
        self.decode(&TokenGrid { tokens: x, ..grid }, &cond, v)
    }

    fn valid_token_frames(&self, v: &VideoLatent<T>, temporal_valid: Option<usize>) -> Result<usize> {
        let shape = v.shape();
        let cfg = self.config;
        if (shape.height, shape.width, shape.channels) != (cfg.latent_height, cfg.latent_width, cfg.latent_channels) {
            return Err(Error::shape(
                "denoiser_forward",
                format!(
                    "latent {:?} does not match configured {}x{}x{}",
                    shape.dims(),
                    cfg.latent_height,
                    cfg.latent_width,
                    cfg.latent_channels
                ),
            ));
        }
        let s = cfg.stride();
        let valid = temporal_valid.unwrap_or(shape.frames);
        if valid == 0 || valid > shape.frames || valid > cfg.frames || !valid.is_multiple_of(s) || !shape.frames.is_multiple_of(s) {
            return Err(Error::shape(
                "denoiser_forward",
                format!(
                    "{valid} temporal frames of {} (configured {}, stride {s})",
                    shape.frames, cfg.frames
                ),
            ));
        }
        Ok(valid / s)
    }

    /// Patch embedding plus positional table. Appended frames (index ≥
    /// `valid`) get the frame-0 table, i.e. the per-image encoding.
    pub fn embed(&self, v: &VideoLatent<T>, valid: usize) -> Result<TokenGrid<T>> {
        let cfg = self.config;
        let mut grid = match cfg.patch_mode {
            PatchMode::Uniform => uniform_patch_embed(v, cfg.patch_h, cfg.patch_w, self.store, "x_embed")?,
            PatchMode::Compression { stride } => {
                compression_patch_embed(v, cfg.patch_h, cfg.patch_w, stride, self.store, "x_embed")?
            }
        };
        let t = grid.n_h * grid.n_w;
        let d = self.d();
        let table = self.store.get("pos_embed")?;
        let mut parts = vec![table.narrow(0, 0, valid * t)?];
        for _ in valid..grid.n_f {
            parts.push(table.narrow(0, 0, t)?);
        }
        let pos = Tensor::concat(&parts, 0)?.reshape(&[grid.n_f, t, d])?;
        grid.tokens = grid.tokens.add(&pos)?;
        Ok(grid)
    }

    pub fn condition(&self, c: &Conditioning) -> Result<Tensor<T>> {
        timestep_class_embed(c, self.store)
    }

    /// Runs the whole stack on `x [n_f, t, D]`.
    pub fn blocks(&self, x: &Tensor<T>, cond: &Tensor<T>, valid: usize) -> Result<Tensor<T>> {
        let mut x = x.clone();
        for i in 0..self.config.layers {
            x = self.block(i, &x, cond, valid)?;
        }
        Ok(x)
    }

    /// Final modulation, linear decoder and (compression mode) temporal
    /// upsampling back to the shape of `like`.
    pub fn decode(
        &self,
        grid: &TokenGrid<T>,
        cond: &Tensor<T>,
        like: &VideoLatent<T>,
    ) -> Result<(VideoLatent<T>, VideoLatent<T>)> {
        let d = self.d();
        let normed = grid.tokens.layer_norm(LN_EPS)?;
        let h = match self.config.cond_mode {
            CondMode::SAdaln => {
                let sc = cond.reshape(&[1, d])?.silu()?;
                let shift = linear(&sc, self.store, "final.ada.shift")?.reshape(&[d])?;
                let scale = linear(&sc, self.store, "final.ada.scale")?.reshape(&[d])?;
                normed.mul(&scale.add_scalar(1.0)?)?.add(&shift)?
            }
            CondMode::AllTokens => normed
                .mul(self.store.get("final.norm.gamma")?)?
                .add(self.store.get("final.norm.beta")?)?,
        };
        let out = TokenGrid {
            tokens: h,
            ..grid.clone()
        };
        token_decode(&out, like.shape(), self.config.patch_h, self.config.patch_w, self.store, "final")
    }

    /// One block on `x [n_f, t, D]`.
    pub fn block(&self, index: usize, x: &Tensor<T>, cond: &Tensor<T>, valid: usize) -> Result<Tensor<T>> {
        let plan = self.config.block_plan();
        let kind = *plan
            .get(index)
            .ok_or_else(|| Error::invalid(format!("block {index} out of range")))?;
        let s = x.shape();
        if s.len() != 3 || s[2] != self.d() || valid == 0 || valid > s[0] {
            return Err(Error::shape(
                "block",
                format!("input {s:?} with {valid} valid frames, width {}", self.d()),
            ));
        }
        let prefix = format!("blocks.{index}");
        let m = self.modulation(&prefix, cond)?;
        let x = match kind {
            BlockKind::Spatial => self.spatial_attention(index, x, cond, &m, Sub::Attn, &format!("{prefix}.attn"))?,
            BlockKind::Temporal => {
                let xt = x.permute(&[1, 0, 2])?;
                let xv = self.temporal_attention(index, &xt, cond, valid, &m, Sub::Attn, &format!("{prefix}.attn"))?;
                let xv = self.mlp(&xv, &m, &prefix)?;
                return join_valid(&xv, &xt, valid)?.permute(&[1, 0, 2]);
            }
            BlockKind::Sequential => {
                let x = self.spatial_attention(index, x, cond, &m, Sub::Attn, &format!("{prefix}.attn"))?;
                let xt = x.permute(&[1, 0, 2])?;
                let xv =
                    self.temporal_attention(index, &xt, cond, valid, &m, Sub::AttnT, &format!("{prefix}.attn_t"))?;
                join_valid(&xv, &xt, valid)?.permute(&[1, 0, 2])?
            }
            BlockKind::SplitHead => self.split_head_attention(index, x, cond, valid, &m, &prefix)?,
        };
        self.mlp(&x, &m, &prefix)
    }

    fn modulation(&self, prefix: &str, cond: &Tensor<T>) -> Result<Modulation<T>> {
        Ok(match self.config.cond_mode {
            CondMode::SAdaln => {
                let d = self.d();
                let sc = cond.reshape(&[1, d])?.silu()?;
                let head = |name: &str| -> Result<Tensor<T>> {
                    linear(&sc, self.store, &format!("{prefix}.ada.{name}"))?.reshape(&[2 * d])
                };
                Modulation::Ada {
                    shift: head("shift")?,
                    scale: head("scale")?,
                    gate: head("gate")?,
                }
            }
            CondMode::AllTokens => Modulation::Tokens {
                prefix: prefix.to_string(),
            },
        })
    }

    fn chunk(&self, t: &Tensor<T>, sub: Sub) -> Result<Tensor<T>> {
        let d = self.d();
        t.narrow(0, sub.chunk() * d, d)
    }

    /// `γ ⊙ LN(x) + β`, with `γ = 1 + scale` regressed from `c` in S-AdaLN mode
    /// and learned LayerNorm affine parameters in all-tokens mode.
    fn pre(&self, x: &Tensor<T>, m: &Modulation<T>, sub: Sub) -> Result<Tensor<T>> {
        let n = x.layer_norm(LN_EPS)?;
        match m {
            Modulation::Ada { shift, scale, .. } => n
                .mul(&self.chunk(scale, sub)?.add_scalar(1.0)?)?
                .add(&self.chunk(shift, sub)?),
            Modulation::Tokens { prefix } => {
                let p = format!("{prefix}.{}", sub.norm());
                n.mul(self.store.get(&format!("{p}.gamma"))?)?
                    .add(self.store.get(&format!("{p}.beta"))?)
            }
        }
    }

    /// `x + α ⊙ y` (S-AdaLN) or `x + y` (all-tokens).
    fn post(&self, x: &Tensor<T>, y: &Tensor<T>, m: &Modulation<T>, sub: Sub) -> Result<Tensor<T>> {
        match m {
            Modulation::Ada { gate, .. } => x.add(&y.mul(&self.chunk(gate, sub)?)?),
            Modulation::Tokens { .. } => x.add(y),
        }
    }

    /// Normalized conditioning token replicated over `batch` sequences,
    /// `[batch, 1, D]`; `None` in S-AdaLN mode.
    fn cond_token(&self, cond: &Tensor<T>, m: &Modulation<T>, sub: Sub, batch: usize) -> Result<Option<Tensor<T>>> {
        match m {
            Modulation::Ada { .. } => Ok(None),
            Modulation::Tokens { .. } => {
                let d = self.d();
                let h = self.pre(&cond.reshape(&[1, d])?, m, sub)?;
                Ok(Some(h.expand_leading(batch)?))
            }
        }
    }

    fn record(&self, block: usize, role: AttnRole, probs: Tensor<T>) {
        if let Some(trace) = &self.trace {
            trace.borrow_mut().push(AttnRecord { block, role, probs });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        block: usize,
        role: AttnRole,
        prefix: &str,
        q_src: &Tensor<T>,
        kv_src: &Tensor<T>,
        heads: usize,
        opts: &AttentionOptions,
    ) -> Result<Tensor<T>> {
        let q = linear(q_src, self.store, &format!("{prefix}.q"))?;
        let k = linear(kv_src, self.store, &format!("{prefix}.k"))?;
        let v = linear(kv_src, self.store, &format!("{prefix}.v"))?;
        let (mixed, probs) = attention_core(&q, &k, &v, heads, opts)?;
        self.record(block, role, probs);
        linear(&mixed, self.store, &format!("{prefix}.o"))
    }

    fn spatial_attention(
        &self,
        block: usize,
        x: &Tensor<T>,
        cond: &Tensor<T>,
        m: &Modulation<T>,
        sub: Sub,
        prefix: &str,
    ) -> Result<Tensor<T>> {
        let h = self.pre(x, m, sub)?;
        let kv = match self.cond_token(cond, m, sub, x.shape()[0])? {
            Some(c) => Tensor::concat(&[c, h.clone()], 1)?,
            None => h.clone(),
        };
        let y = self.attend(
            block,
            AttnRole::Spatial,
            prefix,
            &h,
            &kv,
            self.config.heads,
            &AttentionOptions::default(),
        )?;
        self.post(x, &y, m, sub)
    }

    /// Temporal options for `valid` query frames among `n_f` key frames,
    /// after `extra` leading (conditioning) keys. The conditioning key sits at
    /// rotary position 0, which leaves it unrotated.
    fn temporal_options(&self, n_f: usize, valid: usize, extra: usize) -> AttentionOptions {
        let rope = (self.config.temporal_pos == TemporalPos::Rope).then(|| RopePositions {
            query: (0..valid).collect(),
            key: std::iter::repeat_n(0, extra).chain(0..n_f).collect(),
        });
        AttentionOptions {
            rope,
            key_valid: (valid < n_f).then_some(extra + valid),
        }
    }

    /// Temporal attention sublayer on `xt [t, n_f, D]`; returns the updated
    /// valid frames `[t, valid, D]`.
    #[allow(clippy::too_many_arguments)]
    fn temporal_attention(
        &self,
        block: usize,
        xt: &Tensor<T>,
        cond: &Tensor<T>,
        valid: usize,
        m: &Modulation<T>,
        sub: Sub,
        prefix: &str,
    ) -> Result<Tensor<T>> {
        let (t, n_f) = (xt.shape()[0], xt.shape()[1]);
        let h = self.pre(xt, m, sub)?;
        let (hq, xv) = if valid < n_f {
            (h.narrow(1, 0, valid)?, xt.narrow(1, 0, valid)?)
        } else {
            (h.clone(), xt.clone())
        };
        let c = self.cond_token(cond, m, sub, t)?;
        let extra = usize::from(c.is_some());
        let kv = match c {
            Some(c) => Tensor::concat(&[c, h], 1)?,
            None => h,
        };
        let opts = self.temporal_options(n_f, valid, extra);
        let y = self.attend(block, AttnRole::Temporal, prefix, &hq, &kv, self.config.heads, &opts)?;
        self.post(&xv, &y, m, sub)
    }

    /// Shared q/k/v projections; heads `[0, H/2)` (channels `[0, D/2)`) attend
    /// within frames, the rest across frames. Both halves meet again in the
    /// output projection, which sums their projected contributions.
    fn split_head_attention(
        &self,
        block: usize,
        x: &Tensor<T>,
        cond: &Tensor<T>,
        valid: usize,
        m: &Modulation<T>,
        prefix: &str,
    ) -> Result<Tensor<T>> {
        let (n_f, t, d) = (x.shape()[0], x.shape()[1], self.d());
        let half = d / 2;
        let heads = self.config.heads / 2;
        let attn = format!("{prefix}.attn");
        let h = self.pre(x, m, Sub::Attn)?;
        let q = linear(&h, self.store, &format!("{attn}.q"))?;
        let k = linear(&h, self.store, &format!("{attn}.k"))?;
        let v = linear(&h, self.store, &format!("{attn}.v"))?;
        let c = match self.cond_token(cond, m, Sub::Attn, 1)? {
            Some(c) => Some((
                linear(&c, self.store, &format!("{attn}.k"))?,
                linear(&c, self.store, &format!("{attn}.v"))?,
            )),
            None => None,
        };
        // channels [lo, lo+half) of a [1,1,D] conditioning projection, as [batch,1,half]
        let cond_part = |p: &Tensor<T>, lo: usize, batch: usize| -> Result<Tensor<T>> {
            p.narrow(2, lo, half)?.reshape(&[1, half])?.expand_leading(batch)
        };
        let with_cond = |src: Tensor<T>, lo: usize, batch: usize, which: usize| -> Result<Tensor<T>> {
            match &c {
                Some((ck, cv)) => {
                    let p = if which == 0 { ck } else { cv };
                    Tensor::concat(&[cond_part(p, lo, batch)?, src], 1)
                }
                None => Ok(src),
            }
        };
        let extra = usize::from(c.is_some());

        let qs = q.narrow(2, 0, half)?;
        let ks = with_cond(k.narrow(2, 0, half)?, 0, n_f, 0)?;
        let vs = with_cond(v.narrow(2, 0, half)?, 0, n_f, 1)?;
        let (spatial, ps) = attention_core(&qs, &ks, &vs, heads, &AttentionOptions::default())?;
        self.record(block, AttnRole::Spatial, ps);

        let qt = q.narrow(2, half, half)?.permute(&[1, 0, 2])?;
        let qt = if valid < n_f { qt.narrow(1, 0, valid)? } else { qt };
        let kt = with_cond(k.narrow(2, half, half)?.permute(&[1, 0, 2])?, half, t, 0)?;
        let vt = with_cond(v.narrow(2, half, half)?.permute(&[1, 0, 2])?, half, t, 1)?;
        let opts = self.temporal_options(n_f, valid, extra);
        let (mut temporal, pt) = attention_core(&qt, &kt, &vt, heads, &opts)?;
        self.record(block, AttnRole::Temporal, pt);
        if valid < n_f {
            temporal = Tensor::concat(&[temporal, Tensor::zeros(&[t, n_f - valid, half])], 1)?;
        }
        let temporal = temporal.permute(&[1, 0, 2])?;
        let mixed = Tensor::concat(&[spatial, temporal], 2)?;
        let y = linear(&mixed, self.store, &format!("{attn}.o"))?;
        self.post(x, &y, m, Sub::Attn)
    }

    fn mlp(&self, x: &Tensor<T>, m: &Modulation<T>, prefix: &str) -> Result<Tensor<T>> {
        let h = self.pre(x, m, Sub::Mlp)?;
        let y = linear(
            &linear(&h, self.store, &format!("{prefix}.mlp.fc1"))?.gelu()?,
            self.store,
            &format!("{prefix}.mlp.fc2"),
        )?;
        self.post(x, &y, m, Sub::Mlp)
    }
}

/// Reattaches the untouched appended frames `xt[:, valid..]` after the
/// updated valid frames.
fn join_valid<T: Element>(xv: &Tensor<T>, xt: &Tensor<T>, valid: usize) -> Result<Tensor<T>> {
    let n_f = xt.shape()[1];
    if valid == n_f {
        return Ok(xv.clone());
    }
    Tensor::concat(&[xv.clone(), xt.narrow(1, valid, n_f - valid)?], 1)
}

/// Noise prediction and raw variance for `v` under `c`.
pub fn denoiser_forward<T: Element>(
    config: &ModelConfig,
    store: &ParamStore<T>,
    v: &VideoLatent<T>,
    c: &Conditioning,
    temporal_valid: Option<usize>,
) -> Result<(VideoLatent<T>, VideoLatent<T>)> {
    Denoiser::new(config, store).forward(v, c, temporal_valid)
}
