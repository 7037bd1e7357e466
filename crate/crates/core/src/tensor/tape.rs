//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction. [`Tape::backward`] walks it once in reverse and
//! accumulates gradients into each input in that fixed order.

use super::ops::{self, MatmulPlan};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        plan: MatmulPlan,
    },
    /// `b` is broadcast over the leading axes of `a`.
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    /// Per leading index, take `replace` where `keep` is set, else `base`.
    SelectRows {
        base: Var,
        replace: Var,
        keep: Vec<bool>,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Expand {
        a: Var,
        copies: usize,
    },
    Mean {
        a: Var,
        axis: usize,
    },
    Sum {
        a: Var,
    },
    SoftCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<T>,
        classes: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every tape entry that needs one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// View of `shape` around `axis` as `[outer, axis_len, inner]`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a · b`; see [`ops::matmul`] for the batching rules.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let plan = ops::plan_matmul(self.shape(a), self.shape(b), trans_b)?;
        let data = plan.forward(self.value(a).data(), self.value(b).data());
        let value = Tensor::new(plan.out_shape.clone(), data)?;
        self.record("matmul", value, Op::MatMul { a, b, plan }, &[a, b])
    }

    /// Elementwise sum; `b` may have the shape of a trailing suffix of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let bl = self.value(b).numel();
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % bl])
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        self.record("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.record("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.record("scale", value, Op::Scale { a, factor }, &[a])
    }

    /// Row-wise choice along axis 0: `replace[i]` where `keep[i]`, else `base[i]`.
    pub fn select_rows(&mut self, base: Var, replace: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.shape(base).to_vec();
        if self.shape(replace) != shape.as_slice() || shape[0] != keep.len() {
            return Err(Error::shape("select_rows", &shape, self.shape(replace)));
        }
        let row = self.value(base).numel() / shape[0];
        let mut data = self.value(base).data().to_vec();
        let src = self.value(replace).data();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                data[i * row..(i + 1) * row].copy_from_slice(&src[i * row..(i + 1) * row]);
            }
        }
        let value = Tensor::new(shape, data)?;
        let op = Op::SelectRows {
            base,
            replace,
            keep: keep.to_vec(),
        };
        self.record("select_rows", value, op, &[base, replace])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = ops::softmax(self.value(a))?;
        self.record("softmax", value, Op::Softmax { a }, &[a])
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().expect("rank >= 1");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layernorm", self.shape(x), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layernorm", "eps must be positive"));
        }
        let (out, xhat, rstd) = ops::layernorm_rows(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            T::of(eps),
        );
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.record("layernorm", value, op, &[x, gamma, beta])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = ops::gelu(self.value(a));
        self.record("gelu", value, Op::Gelu { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(perm)?;
        let rg = self.requires_grad(a);
        Ok(self.push(
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Slice { a, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let value = Tensor::new(out_shape, data)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(self.push(value, op, rg))
    }

    /// Stack `copies` of `a` along a new leading axis.
    pub fn expand(&mut self, a: Var, copies: usize) -> Result<Var> {
        if copies == 0 {
            return Err(Error::invalid("expand", "copies must be positive"));
        }
        let src = self.value(a);
        let mut shape = vec![copies];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(copies * src.numel());
        for _ in 0..copies {
            data.extend_from_slice(src.data());
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Expand { a, copies }, rg))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("mean", format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let inv = T::one() / T::of(n as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                add_into(&mut data[o * inner..(o + 1) * inner], row);
            }
        }
        for v in &mut data {
            *v = *v * inv;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(out_shape, data)?;
        self.record("mean", value, Op::Mean { a, axis }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.record("sum", value, Op::Sum { a }, &[a])
    }

    /// Mean over the batch of `-Σ_k target_k log softmax(logits)_k`.
    ///
    /// `logits` is `[batch, classes]`; `targets` has the same shape.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || targets.shape() != shape.as_slice() {
            return Err(Error::shape("soft_cross_entropy", &shape, targets.shape()));
        }
        let classes = shape[1];
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(z.len());
        let mut total = T::zero();
        for (row, t) in z.chunks_exact(classes).zip(targets.data().chunks_exact(classes)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            for (&x, &tk) in row.iter().zip(t) {
                probs.push((x - lse).exp());
                total = total - tk * (x - lse);
            }
        }
        let value = Tensor::scalar(total / T::of(shape[0] as f64));
        let op = Op::SoftCrossEntropy {
            logits,
            probs,
            targets: targets.data().to_vec(),
            classes,
        };
        self.record("soft_cross_entropy", value, op, &[logits])
    }

    /// Gradients of the single-element `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must have one element, shape is {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contribution) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => add_into(acc.data_mut(), contribution.data()),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let gd = g.data();
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v).to_vec(), data);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, plan } => {
                let (da, db) = plan.backward(self.value(*a).data(), self.value(*b).data(), gd);
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::Add { a, b } => {
                let bl = self.value(*b).numel();
                let mut db = vec![T::zero(); bl];
                for chunk in gd.chunks_exact(bl) {
                    add_into(&mut db, chunk);
                }
                vec![(*a, g.clone()), (*b, like(*b, db)?)]
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                let db = gd.iter().zip(av).map(|(&g, &x)| g * x).collect();
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::Scale { a, factor } => vec![(*a, g.map(|x| x * *factor))],
            Op::SelectRows {
                base,
                replace,
                keep,
            } => {
                let row = g.numel() / keep.len();
                let mut db = gd.to_vec();
                let mut dr = vec![T::zero(); gd.len()];
                for (i, &k) in keep.iter().enumerate() {
                    if k {
                        let r = i * row..(i + 1) * row;
                        dr[r.clone()].copy_from_slice(&gd[r.clone()]);
                        db[r].fill(T::zero());
                    }
                }
                vec![(*base, like(*base, db)?), (*replace, like(*replace, dr)?)]
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let cols = *node.value.shape().last().expect("rank >= 1");
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(cols).zip(gd.chunks_exact(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                vec![(*a, like(*a, dx)?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let inv_d = T::one() / T::of(d as f64);
                let mut dx = Vec::with_capacity(gd.len());
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for ((gr, hr), &r) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(rstd) {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hr[j];
                        dgamma[j] = dgamma[j] + gr[j] * hr[j];
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    mean_dh = mean_dh * inv_d;
                    mean_dh_h = mean_dh_h * inv_d;
                    dx.extend((0..d).map(|j| r * (gr[j] * gam[j] - mean_dh - hr[j] * mean_dh_h)));
                }
                vec![
                    (*x, like(*x, dx)?),
                    (*gamma, like(*gamma, dgamma)?),
                    (*beta, like(*beta, dbeta)?),
                ]
            }
            Op::Gelu { a } => {
                let xs = self.value(*a).data();
                let dx = xs
                    .iter()
                    .zip(gd)
                    .map(|(&x, &g)| g * ops::gelu_derivative(x))
                    .collect();
                vec![(*a, like(*a, dx)?)]
            }
            Op::Reshape { a } => vec![(*a, like(*a, gd.to_vec())?)],
            Op::Permute { a, perm } => {
                let inv = ops::inverse_permutation(perm);
                let (_, data) = ops::permute(gd, g.shape(), &inv)?;
                vec![(*a, like(*a, data)?)]
            }
            Op::Slice { a, axis, start } => {
                let shape = self.shape(*a);
                let (outer, n, inner) = split_axis(shape, *axis);
                let len = g.shape()[*axis];
                let mut da = vec![T::zero(); self.value(*a).numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    da[dst..dst + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*a, like(*a, da)?)]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    let mut dp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        dp.extend_from_slice(&gd[src..src + len * inner]);
                    }
                    offset += len;
                    out.push((p, like(p, dp)?));
                }
                out
            }
            Op::Expand { a, copies } => {
                let n = self.value(*a).numel();
                let mut da = vec![T::zero(); n];
                for c in 0..*copies {
                    add_into(&mut da, &gd[c * n..(c + 1) * n]);
                }
                vec![(*a, like(*a, da)?)]
            }
            Op::Mean { a, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                let inv = T::one() / T::of(n as f64);
                let mut da = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let row = &gd[o * inner..(o + 1) * inner];
                    for _ in 0..n {
                        da.extend(row.iter().map(|&x| x * inv));
                    }
                }
                vec![(*a, like(*a, da)?)]
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                vec![(*a, like(*a, vec![gd[0]; n])?)]
            }
            Op::SoftCrossEntropy {
                logits,
                probs,
                targets,
                classes,
            } => {
                let batch = probs.len() / classes;
                let scale = gd[0] / T::of(batch as f64);
                let mut dz = Vec::with_capacity(probs.len());
                for (p, t) in probs.chunks_exact(*classes).zip(targets.chunks_exact(*classes)) {
                    let mass: T = t.iter().copied().sum();
                    dz.extend(p.iter().zip(t).map(|(&pk, &tk)| (pk * mass - tk) * scale));
                }
                vec![(*logits, like(*logits, dz)?)]
            }
        })
    }
}
