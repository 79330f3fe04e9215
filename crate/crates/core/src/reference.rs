//! Dense scalar recomputation of attention and of every block type, written
//! with explicit loops over tokens, heads and channels and no tensor ops.
//! Serves as the brute-force oracle for the tensor implementation.

use crate::backbone::{BlockKind, CondMode, ModelConfig, LN_EPS};
use crate::embedding::{rope_rotate, TemporalPos};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Tokens indexed `[frame][location][channel]`.
pub type Grid = Vec<Vec<Vec<f64>>>;

pub fn grid_from_tensor(x: &Tensor<f64>) -> Grid {
    let s = x.shape();
    let (nf, t, d) = (s[0], s[1], s[2]);
    let data = x.data();
    (0..nf)
        .map(|f| (0..t).map(|p| data[(f * t + p) * d..(f * t + p + 1) * d].to_vec()).collect())
        .collect()
}

pub fn flatten(g: &Grid) -> Vec<f64> {
    g.iter().flatten().flatten().copied().collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Two-pass mean and variance.
pub fn layer_norm(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Multi-head attention over projected tokens. Head `h` uses channels
/// `[h·dh, (h+1)·dh)`. Returns the mixed values and the weights
/// `[head][query][key]`.
pub fn attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    heads: usize,
    rope: Option<(&[usize], &[usize])>,
    key_valid: Option<usize>,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let inner = q[0].len();
    let dh = inner / heads;
    let valid = key_valid.unwrap_or(k.len());
    let mut out = vec![vec![0.0; inner]; q.len()];
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let slice = |x: &[f64]| x[h * dh..(h + 1) * dh].to_vec();
        let mut head_w = Vec::with_capacity(q.len());
        for (i, qi) in q.iter().enumerate() {
            let mut qh = slice(qi);
            if let Some((qp, _)) = rope {
                qh = rope_rotate(&qh, qp[i]);
            }
            let mut scores = Vec::with_capacity(valid);
            for (j, kj) in k.iter().enumerate().take(valid) {
                let mut kh = slice(kj);
                if let Some((_, kp)) = rope {
                    kh = rope_rotate(&kh, kp[j]);
                }
                let dot: f64 = qh.iter().zip(&kh).map(|(a, b)| a * b).sum();
                scores.push(dot / (dh as f64).sqrt());
            }
            let mut w = softmax(&scores);
            for (j, &wj) in w.iter().enumerate() {
                for c in 0..dh {
                    out[i][h * dh + c] += wj * v[j][h * dh + c];
                }
            }
            w.resize(k.len(), 0.0);
            head_w.push(w);
        }
        weights.push(head_w);
    }
    (out, weights)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Sub {
    Attn,
    AttnT,
    Mlp,
}

/// Oracle for one parameter store.
pub struct Reference<'a> {
    pub config: &'a ModelConfig,
    pub store: &'a ParamStore<f64>,
}

impl<'a> Reference<'a> {
    pub fn new(config: &'a ModelConfig, store: &'a ParamStore<f64>) -> Self {
        Self { config, store }
    }

    fn values(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.store.get(name)?.to_vec())
    }

    /// `b + x·W` by explicit sums.
    pub fn linear(&self, x: &[f64], prefix: &str) -> Result<Vec<f64>> {
        let w = self.store.get(&format!("{prefix}.weight"))?;
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let wd = w.data();
        let mut y = match self.store.entry(&format!("{prefix}.bias")) {
            Some(b) => b.tensor.to_vec(),
            None => vec![0.0; cols],
        };
        for (j, yj) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..rows {
                acc += x[i] * wd[i * cols + j];
            }
            *yj += acc;
        }
        Ok(y)
    }

    fn mods(&self, prefix: &str, cond: &[f64]) -> Result<Option<[Vec<f64>; 3]>> {
        if self.config.cond_mode != CondMode::SAdaln {
            return Ok(None);
        }
        let sc: Vec<f64> = cond.iter().map(|&v| silu(v)).collect();
        Ok(Some([
            self.linear(&sc, &format!("{prefix}.ada.shift"))?,
            self.linear(&sc, &format!("{prefix}.ada.scale"))?,
            self.linear(&sc, &format!("{prefix}.ada.gate"))?,
        ]))
    }

    fn chunk(sub: Sub) -> usize {
        match sub {
            Sub::Attn | Sub::AttnT => 0,
            Sub::Mlp => 1,
        }
    }

    fn pre(&self, x: &[f64], prefix: &str, mods: &Option<[Vec<f64>; 3]>, sub: Sub) -> Result<Vec<f64>> {
        let d = x.len();
        let n = layer_norm(x, LN_EPS);
        Ok(match mods {
            Some([shift, scale, _]) => {
                let o = Self::chunk(sub) * d;
                (0..d).map(|i| n[i] * (1.0 + scale[o + i]) + shift[o + i]).collect()
            }
            None => {
                let norm = match sub {
                    Sub::Attn => "norm1",
                    Sub::AttnT => "norm_t",
                    Sub::Mlp => "norm2",
                };
                let g = self.values(&format!("{prefix}.{norm}.gamma"))?;
                let b = self.values(&format!("{prefix}.{norm}.beta"))?;
                (0..d).map(|i| n[i] * g[i] + b[i]).collect()
            }
        })
    }

    fn post(x: &[f64], y: &[f64], mods: &Option<[Vec<f64>; 3]>, sub: Sub) -> Vec<f64> {
        let d = x.len();
        match mods {
            Some([_, _, gate]) => {
                let o = Self::chunk(sub) * d;
                (0..d).map(|i| x[i] + gate[o + i] * y[i]).collect()
            }
            None => (0..d).map(|i| x[i] + y[i]).collect(),
        }
    }

    fn cond_token(&self, cond: &[f64], prefix: &str, mods: &Option<[Vec<f64>; 3]>, sub: Sub) -> Result<Option<Vec<f64>>> {
        if mods.is_some() {
            return Ok(None);
        }
        Ok(Some(self.pre(cond, prefix, mods, sub)?))
    }

    /// Attention sublayer with `{prefix}.q/k/v/o` projections.
    pub fn mha(
        &self,
        q_src: &[Vec<f64>],
        kv_src: &[Vec<f64>],
        prefix: &str,
        heads: usize,
        rope: Option<(&[usize], &[usize])>,
        key_valid: Option<usize>,
    ) -> Result<Vec<Vec<f64>>> {
        let proj = |src: &[Vec<f64>], p: &str| -> Result<Vec<Vec<f64>>> {
            src.iter().map(|x| self.linear(x, &format!("{prefix}.{p}"))).collect()
        };
        let (q, k, v) = (proj(q_src, "q")?, proj(kv_src, "k")?, proj(kv_src, "v")?);
        let (mixed, _) = attention(&q, &k, &v, heads, rope, key_valid);
        proj(&mixed, "o")
    }

    fn mlp(&self, x: &[f64], prefix: &str, mods: &Option<[Vec<f64>; 3]>) -> Result<Vec<f64>> {
        let h = self.pre(x, prefix, mods, Sub::Mlp)?;
        let a: Vec<f64> = self.linear(&h, &format!("{prefix}.mlp.fc1"))?.into_iter().map(gelu).collect();
        let y = self.linear(&a, &format!("{prefix}.mlp.fc2"))?;
        Ok(Self::post(x, &y, mods, Sub::Mlp))
    }

    fn spatial(&self, x: &mut Grid, cond: &[f64], prefix: &str, mods: &Option<[Vec<f64>; 3]>) -> Result<()> {
        for frame in x.iter_mut() {
            let h: Vec<Vec<f64>> = frame
                .iter()
                .map(|tok| self.pre(tok, prefix, mods, Sub::Attn))
                .collect::<Result<_>>()?;
            let mut kv = Vec::new();
            if let Some(c) = self.cond_token(cond, prefix, mods, Sub::Attn)? {
                kv.push(c);
            }
            kv.extend(h.iter().cloned());
            let y = self.mha(&h, &kv, &format!("{prefix}.attn"), self.config.heads, None, None)?;
            for (tok, yt) in frame.iter_mut().zip(&y) {
                *tok = Self::post(tok, yt, mods, Sub::Attn);
            }
        }
        Ok(())
    }

    fn rope_positions(&self, n_f: usize, valid: usize, extra: usize) -> Option<(Vec<usize>, Vec<usize>)> {
        (self.config.temporal_pos == TemporalPos::Rope).then(|| {
            let mut key = vec![0; extra];
            key.extend(0..n_f);
            ((0..valid).collect(), key)
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn temporal(
        &self,
        x: &mut Grid,
        cond: &[f64],
        valid: usize,
        prefix: &str,
        attn: &str,
        mods: &Option<[Vec<f64>; 3]>,
        sub: Sub,
        with_mlp: bool,
    ) -> Result<()> {
        let n_f = x.len();
        for p in 0..x[0].len() {
            let h: Vec<Vec<f64>> = (0..n_f)
                .map(|f| self.pre(&x[f][p], prefix, mods, sub))
                .collect::<Result<_>>()?;
            let mut kv = Vec::new();
            if let Some(c) = self.cond_token(cond, prefix, mods, sub)? {
                kv.push(c);
            }
            let extra = kv.len();
            kv.extend(h.iter().cloned());
            let pos = self.rope_positions(n_f, valid, extra);
            let rope = pos.as_ref().map(|(q, k)| (q.as_slice(), k.as_slice()));
            let y = self.mha(&h[..valid], &kv, &format!("{prefix}.{attn}"), self.config.heads, rope, Some(extra + valid))?;
            for f in 0..valid {
                x[f][p] = Self::post(&x[f][p], &y[f], mods, sub);
                if with_mlp {
                    x[f][p] = self.mlp(&x[f][p], prefix, mods)?;
                }
            }
        }
        Ok(())
    }

    fn split_head(&self, x: &mut Grid, cond: &[f64], valid: usize, prefix: &str, mods: &Option<[Vec<f64>; 3]>) -> Result<()> {
        let (n_f, t, d) = (x.len(), x[0].len(), self.config.hidden);
        let half = d / 2;
        let heads = self.config.heads / 2;
        let attn = format!("{prefix}.attn");
        let mut q = vec![vec![vec![]; t]; n_f];
        let mut k = q.clone();
        let mut v = q.clone();
        for f in 0..n_f {
            for p in 0..t {
                let h = self.pre(&x[f][p], prefix, mods, Sub::Attn)?;
                q[f][p] = self.linear(&h, &format!("{attn}.q"))?;
                k[f][p] = self.linear(&h, &format!("{attn}.k"))?;
                v[f][p] = self.linear(&h, &format!("{attn}.v"))?;
            }
        }
        let ckv = match self.cond_token(cond, prefix, mods, Sub::Attn)? {
            Some(c) => Some((self.linear(&c, &format!("{attn}.k"))?, self.linear(&c, &format!("{attn}.v"))?)),
            None => None,
        };
        let part = |x: &[f64], lo: usize| x[lo..lo + half].to_vec();
        let mut mixed = vec![vec![vec![0.0; d]; t]; n_f];
        for f in 0..n_f {
            let qs: Vec<_> = q[f].iter().map(|r| part(r, 0)).collect();
            let mut ks = Vec::new();
            let mut vs = Vec::new();
            if let Some((ck, cv)) = &ckv {
                ks.push(part(ck, 0));
                vs.push(part(cv, 0));
            }
            ks.extend(k[f].iter().map(|r| part(r, 0)));
            vs.extend(v[f].iter().map(|r| part(r, 0)));
            let (o, _) = attention(&qs, &ks, &vs, heads, None, None);
            for p in 0..t {
                mixed[f][p][..half].copy_from_slice(&o[p]);
            }
        }
        for p in 0..t {
            let qt: Vec<_> = (0..valid).map(|f| part(&q[f][p], half)).collect();
            let mut kt = Vec::new();
            let mut vt = Vec::new();
            if let Some((ck, cv)) = &ckv {
                kt.push(part(ck, half));
                vt.push(part(cv, half));
            }
            let extra = kt.len();
            kt.extend((0..n_f).map(|f| part(&k[f][p], half)));
            vt.extend((0..n_f).map(|f| part(&v[f][p], half)));
            let pos = self.rope_positions(n_f, valid, extra);
            let rope = pos.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()));
            let (o, _) = attention(&qt, &kt, &vt, heads, rope, Some(extra + valid));
            for f in 0..valid {
                mixed[f][p][half..].copy_from_slice(&o[f]);
            }
        }
        for f in 0..n_f {
            for p in 0..t {
                let y = self.linear(&mixed[f][p], &format!("{attn}.o"))?;
                x[f][p] = Self::post(&x[f][p], &y, mods, Sub::Attn);
            }
        }
        Ok(())
    }

    /// Block `index` on `x`, with the first `valid` frames temporal.
    pub fn block(&self, index: usize, x: &Grid, cond: &[f64], valid: usize) -> Result<Grid> {
        let kind = self.config.block_plan()[index];
        let prefix = format!("blocks.{index}");
        let mods = self.mods(&prefix, cond)?;
        let mut x = x.clone();
        match kind {
            BlockKind::Spatial => self.spatial(&mut x, cond, &prefix, &mods)?,
            BlockKind::Temporal => {
                self.temporal(&mut x, cond, valid, &prefix, "attn", &mods, Sub::Attn, true)?;
                return Ok(x);
            }
            BlockKind::Sequential => {
                self.spatial(&mut x, cond, &prefix, &mods)?;
                self.temporal(&mut x, cond, valid, &prefix, "attn_t", &mods, Sub::AttnT, false)?;
            }
            BlockKind::SplitHead => self.split_head(&mut x, cond, valid, &prefix, &mods)?,
        }
        for frame in x.iter_mut() {
            for tok in frame.iter_mut() {
                *tok = self.mlp(tok, &prefix, &mods)?;
            }
        }
        Ok(x)
    }

    /// Unmodulated pre-norm Transformer block over one token sequence, with
    /// the attention and MLP weights of block `index`.
    pub fn plain_block(&self, index: usize, tokens: &[Vec<f64>], heads: usize) -> Result<Vec<Vec<f64>>> {
        let prefix = format!("blocks.{index}");
        let h: Vec<Vec<f64>> = tokens.iter().map(|t| layer_norm(t, LN_EPS)).collect();
        let y = self.mha(&h, &h, &format!("{prefix}.attn"), heads, None, None)?;
        let mut out = Vec::with_capacity(tokens.len());
        for (t, yt) in tokens.iter().zip(&y) {
            let x1: Vec<f64> = t.iter().zip(yt).map(|(a, b)| a + b).collect();
            let a: Vec<f64> = self
                .linear(&layer_norm(&x1, LN_EPS), &format!("{prefix}.mlp.fc1"))?
                .into_iter()
                .map(gelu)
                .collect();
            let m = self.linear(&a, &format!("{prefix}.mlp.fc2"))?;
            out.push(x1.iter().zip(&m).map(|(a, b)| a + b).collect());
        }
        Ok(out)
    }
}
