use super::mutation::{self, Mutation};
use super::shape::{is_suffix, numel, permute_data};
use super::{Element, Op, Tensor};
use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub(crate) fn phi_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

pub(crate) fn phi_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

impl<T: Element> Tensor<T> {
    fn suffix_broadcast(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if is_suffix(self.shape(), other.shape()) {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{:?} does not broadcast onto {:?}", other.shape(), self.shape()),
            ))
        }
    }

    /// Elementwise sum; `rhs` may have a shape equal to a suffix of `self`'s.
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.suffix_broadcast(rhs, "add")?;
        let r = rhs.data();
        let n = r.len();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + r[i % n])
            .collect();
        Tensor::from_op(Op::Add(self.clone(), rhs.clone()), self.shape().to_vec(), data)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", self.shape(), rhs.shape()),
            ));
        }
        let data = self.data().iter().zip(rhs.data()).map(|(&a, &b)| a - b).collect();
        Tensor::from_op(Op::Sub(self.clone(), rhs.clone()), self.shape().to_vec(), data)
    }

    /// Elementwise product; `rhs` may have a shape equal to a suffix of `self`'s.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.suffix_broadcast(rhs, "mul")?;
        let r = rhs.data();
        let n = r.len();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a * r[i % n])
            .collect();
        Tensor::from_op(Op::Mul(self.clone(), rhs.clone()), self.shape().to_vec(), data)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor<T>> {
        let f = T::from_f64(factor);
        let data = self.data().iter().map(|&a| a * f).collect();
        Tensor::from_op(Op::Scale(self.clone(), f), self.shape().to_vec(), data)
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        self.mul(self)
    }

    fn matmul_dims(&self, rhs: &Tensor<T>, op: &'static str, transposed: bool) -> Result<(usize, usize, usize, usize, bool)> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape(op, format!("{a:?} x {b:?} needs rank >= 2")));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = if transposed {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if k != bk {
            return Err(Error::shape(op, format!("{a:?} x {b:?} inner extents differ")));
        }
        let batch = numel(&a[..a.len() - 2]);
        let shared = b.len() == 2 && !transposed;
        if !shared && a[..a.len() - 2] != b[..b.len() - 2] {
            return Err(Error::shape(op, format!("{a:?} x {b:?} batch extents differ")));
        }
        Ok((batch, m, k, n, shared))
    }

    /// Matrix product over the last two axes. `rhs` is either a shared
    /// `[k, n]` matrix or has the same leading batch extents as `self`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, m, k, n, shared) = self.matmul_dims(rhs, "matmul", false)?;
        let mut out = vec![T::zero(); batch * m * n];
        if shared {
            T::gemm(batch * m, k, n, self.data(), (k, 1), rhs.data(), (n, 1), &mut out);
        } else {
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &self.data()[bi * m * k..(bi + 1) * m * k],
                    (k, 1),
                    &rhs.data()[bi * k * n..(bi + 1) * k * n],
                    (n, 1),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Tensor::from_op(Op::MatMul(self.clone(), rhs.clone()), shape, out)
    }

    /// `self · rhsᵀ` over the last two axes with matching batch extents.
    pub fn matmul_t(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, m, k, n, _) = self.matmul_dims(rhs, "matmul_t", true)?;
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &self.data()[bi * m * k..(bi + 1) * m * k],
                (k, 1),
                &rhs.data()[bi * n * k..(bi + 1) * n * k],
                (1, k),
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Tensor::from_op(Op::MatMulT(self.clone(), rhs.clone()), shape, out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Tensor::from_op(Op::Reshape(self.clone()), shape.to_vec(), self.to_vec())
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let data = permute_data(self.data(), self.shape(), perm);
        let shape = perm.iter().map(|&p| self.shape()[p]).collect();
        Tensor::from_op(Op::Permute(self.clone(), perm.to_vec()), shape, data)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Axis {
                op: "transpose_last",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) outside extent {} of axis {axis}", start + len, shape[axis]),
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let ext = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Tensor::from_op(
            Op::Narrow {
                input: self.clone(),
                axis,
                start,
            },
            out_shape,
            data,
        )
    }

    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank,
            });
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape()[..axis] == first.shape()[..axis]
                && p.shape()[axis + 1..] == first.shape()[axis + 1..];
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", first.shape(), p.shape()),
                ));
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let total_ext: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_ext * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_ext;
        Tensor::from_op(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
            data,
        )
    }

    /// Repeats the tensor `n` times along a new leading axis.
    pub fn expand_leading(&self, n: usize) -> Result<Tensor<T>> {
        if n == 0 {
            return Err(Error::shape("expand", "zero copies"));
        }
        let mut data = Vec::with_capacity(n * self.numel());
        for _ in 0..n {
            data.extend_from_slice(self.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape());
        Tensor::from_op(Op::ExpandLeading(self.clone()), shape, data)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let sign = if mutation::active(Mutation::SoftmaxSign) {
            -T::one()
        } else {
            T::one()
        };
        let outer = numel(&shape[..axis]);
        let ext = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * ext + j) * inner + i;
                let mut m = sign * x[at(0)];
                for j in 1..ext {
                    m = m.max(sign * x[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..ext {
                    let e = (sign * x[at(j)] - m).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..ext {
                    out[at(j)] = out[at(j)] / s;
                }
            }
        }
        Tensor::from_op(
            Op::Softmax {
                input: self.clone(),
                axis,
            },
            shape.to_vec(),
            out,
        )
    }

    /// Softmax along the last axis over the first `valid` positions only;
    /// the remaining positions receive probability exactly zero.
    pub fn masked_softmax(&self, valid: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        let ext = *shape.last().ok_or(Error::Axis {
            op: "masked_softmax",
            axis: 0,
            rank: 0,
        })?;
        if valid == 0 || valid > ext {
            return Err(Error::shape(
                "masked_softmax",
                format!("valid length {valid} for extent {ext}"),
            ));
        }
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for (row_in, row_out) in x.chunks(ext).zip(out.chunks_mut(ext)) {
            let m = row_in[..valid].iter().fold(row_in[0], |m, &v| m.max(v));
            let mut s = T::zero();
            for j in 0..valid {
                let e = (row_in[j] - m).exp();
                row_out[j] = e;
                s += e;
            }
            for v in row_out[..valid].iter_mut() {
                *v = *v / s;
            }
        }
        Tensor::from_op(
            Op::MaskedSoftmax {
                input: self.clone(),
                valid,
            },
            shape.to_vec(),
            out,
        )
    }

    /// Normalizes each last-axis vector to zero mean and unit (biased)
    /// variance; no affine parameters.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor<T>> {
        let d = *self.shape().last().unwrap_or(&0);
        if d < 2 {
            return Err(Error::shape(
                "layer_norm",
                format!("last extent {d} < 2"),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("layer_norm: eps must be > 0, got {eps}")));
        }
        let eps = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut out = vec![T::zero(); self.numel()];
        let mut rstds = Vec::with_capacity(self.numel() / d);
        for (row, orow) in self.data().chunks(d).zip(out.chunks_mut(d)) {
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        Tensor::from_op(
            Op::LayerNorm {
                input: self.clone(),
                rstd: rstds,
            },
            self.shape().to_vec(),
            out,
        )
    }

    /// Applies `f` elementwise; `f` returns (value, derivative).
    pub(crate) fn map(&self, name: &'static str, f: impl Fn(f64) -> (f64, f64)) -> Result<Tensor<T>> {
        self.map_indexed(name, |_, x| f(x))
    }

    /// Like `map`, with the flat element index passed to `f`.
    pub(crate) fn map_indexed(&self, name: &'static str, f: impl Fn(usize, f64) -> (f64, f64)) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(self.numel());
        let mut deriv = Vec::with_capacity(self.numel());
        for (i, &v) in self.data().iter().enumerate() {
            let (y, dy) = f(i, v.to_f64());
            data.push(T::from_f64(y));
            deriv.push(T::from_f64(dy));
        }
        check_finite_named(name, &deriv)?;
        Tensor::from_op(
            Op::Map {
                input: self.clone(),
                deriv,
                name,
            },
            self.shape().to_vec(),
            data,
        )
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        self.map("gelu", |x| {
            let cdf = phi_cdf(x);
            (x * cdf, cdf + x * phi_pdf(x))
        })
    }

    pub fn silu(&self) -> Result<Tensor<T>> {
        self.map("silu", |x| {
            let s = 1.0 / (1.0 + (-x).exp());
            (x * s, s * (1.0 + x * (1.0 - s)))
        })
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.map("exp", |x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<T>> {
        self.map("add_scalar", |x| (x + c, 1.0))
    }

    pub fn sum(&self) -> Result<Tensor<T>> {
        let mut s = T::zero();
        for &v in self.data() {
            s += v;
        }
        Tensor::from_op(Op::Sum(self.clone()), Vec::new(), vec![s])
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    /// Rotary embedding over the last axis of a `[.., S, d]` tensor; sequence
    /// index `i` is rotated by `positions[i]`. Pairs `(2j, 2j+1)` turn by
    /// `pos · base^(-2j/d)`.
    pub fn rope(&self, positions: &[usize], base: f64) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::shape("rope", format!("rank {} < 2", shape.len())));
        }
        let d = shape[shape.len() - 1];
        let s = shape[shape.len() - 2];
        if !d.is_multiple_of(2) {
            return Err(Error::shape("rope", format!("head dim {d} is odd")));
        }
        if positions.len() != s {
            return Err(Error::shape(
                "rope",
                format!("{} positions for sequence length {s}", positions.len()),
            ));
        }
        let half = d / 2;
        let mut cos = Vec::with_capacity(s * half);
        let mut sin = Vec::with_capacity(s * half);
        for &p in positions {
            for j in 0..half {
                let theta = base.powf(-2.0 * j as f64 / d as f64);
                let ang = p as f64 * theta;
                cos.push(T::from_f64(ang.cos()));
                sin.push(T::from_f64(ang.sin()));
            }
        }
        let out = rotate(self.data(), s, d, &cos, &sin, false);
        Tensor::from_op(
            Op::Rope {
                input: self.clone(),
                cos,
                sin,
            },
            shape.to_vec(),
            out,
        )
    }
}

fn check_finite_named<T: Element>(name: &'static str, v: &[T]) -> Result<()> {
    super::check_finite(name, v)
}

/// Rotates each `(2j, 2j+1)` pair; `inverse` turns by the negated angle.
pub(crate) fn rotate<T: Element>(x: &[T], s: usize, d: usize, cos: &[T], sin: &[T], inverse: bool) -> Vec<T> {
    let half = d / 2;
    let mut out = vec![T::zero(); x.len()];
    for (ri, (row, orow)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let pos = ri % s;
        for j in 0..half {
            let c = cos[pos * half + j];
            let sn = if inverse { -sin[pos * half + j] } else { sin[pos * half + j] };
            let (a, b) = (row[2 * j], row[2 * j + 1]);
            orow[2 * j] = a * c - b * sn;
            orow[2 * j + 1] = a * sn + b * c;
        }
    }
    out
}
