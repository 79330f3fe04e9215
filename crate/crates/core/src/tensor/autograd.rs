use std::collections::{HashMap, HashSet};

use super::ops::rotate;
use super::shape::{inverse_perm, numel, permute_data};
use super::{check_finite, Element, Op, Tensor};
use crate::error::{Error, Result};

/// Gradients of a scalar loss with respect to the leaves it reached.
pub struct Gradients<T: Element> {
    leaves: HashMap<u64, Vec<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.leaves.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient for `t`, all zeros when the loss does not depend on it.
    pub fn wrt(&self, t: &Tensor<T>) -> Vec<T> {
        self.get(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); t.numel()])
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

fn accumulate<T: Element>(map: &mut HashMap<u64, Vec<T>>, id: u64, g: Vec<T>) {
    match map.get_mut(&id) {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => {
            map.insert(id, g);
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Reverse-mode sweep from this scalar.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        // Collect the recorded graph below the loss.
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.tracks_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = t.op() {
                for inp in op.inputs() {
                    stack.push(inp.clone());
                }
            }
            nodes.push(t);
        }
        // Ids grow with creation order, so descending id is a reverse
        // topological schedule.
        nodes.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        let mut leaves = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for node in &nodes {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match node.op() {
                None => {
                    leaves.insert(node.id(), grad);
                }
                Some(op) => {
                    let inputs = op.inputs();
                    let input_grads = backward_op(op, node, &grad)?;
                    for (inp, g) in inputs.into_iter().zip(input_grads) {
                        if let Some(g) = g {
                            if inp.tracks_grad() {
                                check_finite(op.name(), &g)?;
                                accumulate(&mut pending, inp.id(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Sums `g` (shaped like `full`) down onto a suffix shape of `n` elements.
fn reduce_to_suffix<T: Element>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn backward_op<T: Element>(op: &Op<T>, out: &Tensor<T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
    let grads = match op {
        Op::Add(_, b) => {
            let gb = if b.tracks_grad() {
                Some(reduce_to_suffix(g, b.numel()))
            } else {
                None
            };
            vec![Some(g.to_vec()), gb]
        }
        Op::Sub(_, _) => vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
        Op::Mul(a, b) => {
            let (ad, bd) = (a.data(), b.data());
            let n = bd.len();
            let ga = if a.tracks_grad() {
                Some(g.iter().enumerate().map(|(i, &v)| v * bd[i % n]).collect())
            } else {
                None
            };
            let gb = if b.tracks_grad() {
                let prod: Vec<T> = g.iter().zip(ad).map(|(&v, &x)| v * x).collect();
                Some(reduce_to_suffix(&prod, n))
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::Scale(_, f) => vec![Some(g.iter().map(|&v| v * *f).collect())],
        Op::MatMul(a, b) => matmul_backward(a, b, g)?,
        Op::MatMulT(a, b) => matmul_t_backward(a, b, g),
        Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::Permute(_, perm) => {
            let inv = inverse_perm(perm);
            vec![Some(permute_data(g, out.shape(), &inv))]
        }
        Op::Narrow { input, axis, start } => {
            let shape = input.shape();
            let outer = numel(&shape[..*axis]);
            let inner = numel(&shape[axis + 1..]);
            let ext = shape[*axis];
            let len = out.shape()[*axis];
            let mut gi = vec![T::zero(); input.numel()];
            for o in 0..outer {
                let dst = (o * ext + start) * inner;
                let src = o * len * inner;
                gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![Some(gi)]
        }
        Op::Concat { parts, axis } => {
            let first = parts[0].shape();
            let outer = numel(&first[..*axis]);
            let inner = numel(&first[axis + 1..]);
            let total: usize = parts.iter().map(|p| p.shape()[*axis]).sum();
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for p in parts {
                let chunk = p.shape()[*axis] * inner;
                let mut gp = Vec::with_capacity(p.numel());
                for o in 0..outer {
                    let base = o * total * inner + offset;
                    gp.extend_from_slice(&g[base..base + chunk]);
                }
                offset += chunk;
                res.push(if p.tracks_grad() { Some(gp) } else { None });
            }
            res
        }
        Op::ExpandLeading(a) => vec![Some(reduce_to_suffix(g, a.numel()))],
        Op::Softmax { input, axis } => {
            let shape = input.shape();
            let outer = numel(&shape[..*axis]);
            let ext = shape[*axis];
            let inner = numel(&shape[axis + 1..]);
            let y = out.data();
            let mut gi = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * ext + j) * inner + i;
                    let mut dot = T::zero();
                    for j in 0..ext {
                        dot += g[at(j)] * y[at(j)];
                    }
                    for j in 0..ext {
                        gi[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(gi)]
        }
        Op::MaskedSoftmax { input, valid } => {
            let ext = *input.shape().last().unwrap();
            let y = out.data();
            let mut gi = vec![T::zero(); y.len()];
            for ((yr, gr), gir) in y.chunks(ext).zip(g.chunks(ext)).zip(gi.chunks_mut(ext)) {
                let mut dot = T::zero();
                for j in 0..*valid {
                    dot += gr[j] * yr[j];
                }
                for j in 0..*valid {
                    gir[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gi)]
        }
        Op::LayerNorm { input, rstd } => {
            let d = *input.shape().last().unwrap();
            let inv_d = T::from_f64(1.0 / d as f64);
            let xhat = out.data();
            let mut gi = vec![T::zero(); xhat.len()];
            for (r, ((xr, gr), gir)) in xhat.chunks(d).zip(g.chunks(d)).zip(gi.chunks_mut(d)).enumerate() {
                let mut mg = T::zero();
                let mut mgx = T::zero();
                for (&x, &gv) in xr.iter().zip(gr) {
                    mg += gv;
                    mgx += gv * x;
                }
                mg *= inv_d;
                mgx *= inv_d;
                for j in 0..d {
                    gir[j] = rstd[r] * (gr[j] - mg - xr[j] * mgx);
                }
            }
            vec![Some(gi)]
        }
        Op::Map { deriv, .. } => vec![Some(g.iter().zip(deriv).map(|(&v, &d)| v * d).collect())],
        Op::Sum(a) => vec![Some(vec![g[0]; a.numel()])],
        Op::Rope { input, cos, sin } => {
            let shape = input.shape();
            let d = shape[shape.len() - 1];
            let s = shape[shape.len() - 2];
            vec![Some(rotate(g, s, d, cos, sin, true))]
        }
    };
    Ok(grads)
}

fn matmul_backward<T: Element>(a: &Tensor<T>, b: &Tensor<T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
    let ash = a.shape();
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let n = b.shape()[b.rank() - 1];
    let batch = numel(&ash[..ash.len() - 2]);
    let shared = b.rank() == 2;
    let (ad, bd) = (a.data(), b.data());
    let ga = if a.tracks_grad() {
        // dA = dC · Bᵀ
        let mut ga = vec![T::zero(); a.numel()];
        if shared {
            T::gemm(batch * m, n, k, g, (n, 1), bd, (1, n), &mut ga);
        } else {
            for bi in 0..batch {
                T::gemm(
                    m,
                    n,
                    k,
                    &g[bi * m * n..(bi + 1) * m * n],
                    (n, 1),
                    &bd[bi * k * n..(bi + 1) * k * n],
                    (1, n),
                    &mut ga[bi * m * k..(bi + 1) * m * k],
                );
            }
        }
        Some(ga)
    } else {
        None
    };
    let gb = if b.tracks_grad() {
        // dB = Aᵀ · dC
        let mut gb = vec![T::zero(); b.numel()];
        if shared {
            T::gemm(k, batch * m, n, ad, (1, k), g, (n, 1), &mut gb);
        } else {
            for bi in 0..batch {
                T::gemm(
                    k,
                    m,
                    n,
                    &ad[bi * m * k..(bi + 1) * m * k],
                    (1, k),
                    &g[bi * m * n..(bi + 1) * m * n],
                    (n, 1),
                    &mut gb[bi * k * n..(bi + 1) * k * n],
                );
            }
        }
        Some(gb)
    } else {
        None
    };
    Ok(vec![ga, gb])
}

fn matmul_t_backward<T: Element>(a: &Tensor<T>, b: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
    let ash = a.shape();
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let n = b.shape()[b.rank() - 2];
    let batch = numel(&ash[..ash.len() - 2]);
    let (ad, bd) = (a.data(), b.data());
    let ga = a.tracks_grad().then(|| {
        // C = A·Bᵀ ⇒ dA = dC · B
        let mut ga = vec![T::zero(); a.numel()];
        for bi in 0..batch {
            T::gemm(
                m,
                n,
                k,
                &g[bi * m * n..(bi + 1) * m * n],
                (n, 1),
                &bd[bi * n * k..(bi + 1) * n * k],
                (k, 1),
                &mut ga[bi * m * k..(bi + 1) * m * k],
            );
        }
        ga
    });
    let gb = b.tracks_grad().then(|| {
        // dB = dCᵀ · A
        let mut gb = vec![T::zero(); b.numel()];
        for bi in 0..batch {
            T::gemm(
                n,
                m,
                k,
                &g[bi * m * n..(bi + 1) * m * n],
                (1, n),
                &ad[bi * m * k..(bi + 1) * m * k],
                (k, 1),
                &mut gb[bi * n * k..(bi + 1) * n * k],
            );
        }
        gb
    });
    vec![ga, gb]
}
