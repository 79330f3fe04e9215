//! Multi-head scaled dot-product attention.
//!
//! One kernel serves spatial and temporal attention; callers arrange the
//! token grid so each batch row is one attention sequence.

use crate::error::{Error, Result};
use crate::params::{linear, ParamStore};
use crate::tensor::{Element, Tensor};

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotary positions for the query and key sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RopePositions {
    pub query: Vec<usize>,
    pub key: Vec<usize>,
}

impl RopePositions {
    pub fn same(positions: Vec<usize>) -> Self {
        Self {
            key: positions.clone(),
            query: positions,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AttentionOptions {
    pub rope: Option<RopePositions>,
    /// Only the first `n` key positions may receive weight.
    pub key_valid: Option<usize>,
}

/// Splits `[B, S, H·dh]` into `[B, H, S, dh]`.
fn split_heads<T: Element>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let (b, len, inner) = (s[0], s[1], s[2]);
    x.reshape(&[b, len, heads, inner / heads])?.permute(&[0, 2, 1, 3])
}

fn merge_heads<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let (b, h, len, dh) = (s[0], s[1], s[2], s[3]);
    x.permute(&[0, 2, 1, 3])?.reshape(&[b, len, h * dh])
}

/// Attention over already projected `q [B,Sq,I]`, `k,v [B,Sk,I]`. Returns the
/// mixed values `[B,Sq,I]` and the weights `[B,H,Sq,Sk]`.
pub fn attention_core<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    opts: &AttentionOptions,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
        return Err(Error::shape("attention", "projected inputs must be rank 3"));
    }
    let inner = q.shape()[2];
    if heads == 0 || !inner.is_multiple_of(heads) {
        return Err(Error::shape(
            "attention",
            format!("inner dim {inner} not divisible into {heads} heads"),
        ));
    }
    if k.shape() != v.shape() || k.shape()[0] != q.shape()[0] || k.shape()[2] != inner {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let dh = inner / heads;
    let mut qh = split_heads(q, heads)?;
    let mut kh = split_heads(k, heads)?;
    let vh = split_heads(v, heads)?;
    if let Some(rope) = &opts.rope {
        qh = qh.rope(&rope.query, ROPE_BASE)?;
        kh = kh.rope(&rope.key, ROPE_BASE)?;
    }
    let scores = qh.matmul_t(&kh)?.scale(1.0 / (dh as f64).sqrt())?;
    let probs = match opts.key_valid {
        Some(valid) => scores.masked_softmax(valid)?,
        None => scores.softmax(3)?,
    };
    let mixed = probs.matmul(&vh)?;
    Ok((merge_heads(&mixed)?, probs))
}

fn check_sources<T: Element>(q_src: &Tensor<T>, kv_src: &Tensor<T>) -> Result<()> {
    let (qs, ks) = (q_src.shape(), kv_src.shape());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::shape(
            "multi_head_attention",
            format!("query source {qs:?} vs key/value source {ks:?}"),
        ));
    }
    Ok(())
}

/// Full attention sublayer: projections `{prefix}.q/k/v/o` around the core.
/// `q_src` is `[B,Sq,D]`, `kv_src` `[B,Sk,D]`; the output matches `q_src`.
pub fn multi_head_attention<T: Element>(
    q_src: &Tensor<T>,
    kv_src: &Tensor<T>,
    store: &ParamStore<T>,
    prefix: &str,
    heads: usize,
    opts: &AttentionOptions,
) -> Result<Tensor<T>> {
    check_sources(q_src, kv_src)?;
    let q = linear(q_src, store, &format!("{prefix}.q"))?;
    let k = linear(kv_src, store, &format!("{prefix}.k"))?;
    let v = linear(kv_src, store, &format!("{prefix}.v"))?;
    let (mixed, _) = attention_core(&q, &k, &v, heads, opts)?;
    linear(&mixed, store, &format!("{prefix}.o"))
}

/// Attention weights `[B,H,Sq,Sk]` the sublayer would use.
pub fn attention_weights<T: Element>(
    q_src: &Tensor<T>,
    kv_src: &Tensor<T>,
    store: &ParamStore<T>,
    prefix: &str,
    heads: usize,
    opts: &AttentionOptions,
) -> Result<Tensor<T>> {
    check_sources(q_src, kv_src)?;
    let q = linear(q_src, store, &format!("{prefix}.q"))?;
    let k = linear(kv_src, store, &format!("{prefix}.k"))?;
    let v = linear(kv_src, store, &format!("{prefix}.v"))?;
    Ok(attention_core(&q, &k, &v, heads, opts)?.1)
}
