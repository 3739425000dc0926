//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every forward operation appends a node holding its output value and the
//! information its backward rule needs. [`Tape::backward`] walks the tape
//! in reverse from a scalar root and returns per-node gradients; those for
//! parameter leaves can then be accumulated into a [`ParamStore`].

use std::collections::HashMap;

use super::kernels::{gelu, gelu_grad, matmul_2d, matmul_a_bt, matmul_at_b};
use super::{inverse_permutation, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Gelu(Var),
    Tanh(Var),
    IndexSelect {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Abs(Var),
    L1(Var, Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    param: Option<ParamId>,
    tag: Option<&'static str>,
}

/// Recording context for one forward/backward pass.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which nothing requires a gradient (inference, frozen modules).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Shapes of every buffer recorded so far, in creation order.
    pub fn buffer_shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.nodes.iter().map(|n| n.value.shape())
    }

    /// Shapes of the buffers carrying `tag`.
    pub fn tagged_shapes(&self, tag: &str) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .filter(|n| n.tag == Some(tag))
            .map(|n| n.value.shape().to_vec())
            .collect()
    }

    pub fn tag(&mut self, v: Var, tag: &'static str) {
        self.nodes[v.0].tag = Some(tag);
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
            param: None,
            tag: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient but is not tied to a parameter store.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts (once per tape) a leaf mirroring a stored parameter.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.requires_grad);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- ops

    fn suffix_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(
                op,
                format!(
                    "{:?} cannot be broadcast against {:?} (trailing axes must match)",
                    sb, sa
                ),
            ));
        }
        Ok(())
    }

    /// `a + b`, where `b`'s shape must equal a trailing suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_broadcast("add", a, b)?;
        let bv = self.value(b).data();
        let nb = bv.len().max(1);
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(nb) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_broadcast("sub", a, b)?;
        let bv = self.value(b).data();
        let nb = bv.len().max(1);
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(nb) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o -= x;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product with the same trailing broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_broadcast("mul", a, b)?;
        let bv = self.value(b).data();
        let nb = bv.len().max(1);
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(nb) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o *= x;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Batched matrix product over the last two axes. Leading batch axes
    /// must agree or be 1; a rank-2 right operand is shared by every batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let mut out = vec![S::zero(); plan.out_numel()];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let (m, k, n) = (plan.m, plan.k, plan.n);
            for (ob, (ao, bo)) in plan.batches.iter().enumerate() {
                matmul_2d(
                    &av[ao * m * k..(ao + 1) * m * k],
                    &bv[bo * k * n..(bo + 1) * k * n],
                    &mut out[ob * m * n..(ob + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let value = Tensor::new(plan.out_shape.clone(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(axes)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = *x.shape().last().unwrap_or(&1);
        if d == 0 {
            return Err(Error::shape("softmax_last", "last extent must be at least 1"));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("softmax_last input".into()));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of last-axis length).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "layer_norm eps must be > 0, got {}",
                eps
            )));
        }
        let d = *self.shape(a).last().unwrap_or(&1);
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.shape(v) != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{} has shape {:?}, expected [{}]", name, self.shape(v), d),
                ));
            }
        }
        let x = self.value(a);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = x.numel() / d.max(1);
        let mut xhat = Vec::with_capacity(x.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.numel());
        let inv_d = S::one() / S::from_usize(d).unwrap();
        for row in x.data().chunks(d) {
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let r = S::one() / (var + S::lit(eps)).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let out = self.value(a).index_select(axis, indices)?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::IndexSelect {
                x: a,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.index_select(a, axis, &idx)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat(&tensors, axis)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<S>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<S>() / S::from_usize(t.numel().max(1)).unwrap();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.abs());
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    /// Mean absolute difference between two same-shaped tensors.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape(
                "l1_loss",
                format!("prediction {:?} vs target {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = p.len();
        let total = p.iter().zip(t).map(|(&a, &b)| (a - b).abs()).sum::<S>();
        let loss = if n == 0 {
            S::zero()
        } else {
            total / S::from_usize(n).unwrap()
        };
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(loss), Op::L1(pred, target), rg))
    }

    // ----------------------------------------------------------- backward

    /// Propagates gradients from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let rt = self.value(root);
        if rt.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got shape {:?}", rt.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rt.shape(), S::one()));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -S::one()
                } else {
                    S::one()
                };
                if self.rg(*a) {
                    accumulate(grads, *a, || g.clone());
                }
                if self.rg(*b) {
                    let shape = self.shape(*b).to_vec();
                    accumulate(grads, *b, || {
                        let nb: usize = shape.iter().product::<usize>().max(1);
                        let mut out = vec![S::zero(); nb];
                        for chunk in gd.chunks(nb) {
                            for (o, &x) in out.iter_mut().zip(chunk) {
                                *o += sign * x;
                            }
                        }
                        Tensor::new(shape, out).expect("reduced gradient shape")
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let nb = bv.len().max(1);
                if self.rg(*a) {
                    accumulate(grads, *a, || {
                        let data = gd
                            .chunks(nb)
                            .flat_map(|c| c.iter().zip(bv).map(|(&x, &y)| x * y))
                            .collect();
                        Tensor::new(self.shape(*a).to_vec(), data).unwrap()
                    });
                }
                if self.rg(*b) {
                    accumulate(grads, *b, || {
                        let mut out = vec![S::zero(); nb];
                        for (gc, ac) in gd.chunks(nb).zip(av.chunks(nb)) {
                            for ((o, &x), &y) in out.iter_mut().zip(gc).zip(ac) {
                                *o += x * y;
                            }
                        }
                        Tensor::new(self.shape(*b).to_vec(), out).unwrap()
                    });
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, || g.map(|v| v * c));
            }
            Op::MatMul(a, b) => {
                let plan = MatmulPlan::new(self.shape(*a), self.shape(*b))?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut ga = vec![S::zero(); av.len()];
                    for (ob, (ao, bo)) in plan.batches.iter().enumerate() {
                        matmul_a_bt(
                            &gd[ob * m * n..(ob + 1) * m * n],
                            &bv[bo * k * n..(bo + 1) * k * n],
                            &mut ga[ao * m * k..(ao + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    let t = Tensor::new(self.shape(*a).to_vec(), ga)?;
                    accumulate(grads, *a, || t);
                }
                if self.rg(*b) {
                    let mut gb = vec![S::zero(); bv.len()];
                    for (ob, (ao, bo)) in plan.batches.iter().enumerate() {
                        matmul_at_b(
                            &av[ao * m * k..(ao + 1) * m * k],
                            &gd[ob * m * n..(ob + 1) * m * n],
                            &mut gb[bo * k * n..(bo + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    let t = Tensor::new(self.shape(*b).to_vec(), gb)?;
                    accumulate(grads, *b, || t);
                }
            }
            Op::Permute(a, axes) => {
                let t = g.permute(&inverse_permutation(axes))?;
                accumulate(grads, *a, || t);
            }
            Op::Reshape(a) => {
                let t = g.clone().reshape(self.shape(*a))?;
                accumulate(grads, *a, || t);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(d).zip(gd.chunks(d)) {
                    let dot = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<S>();
                    out.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                let t = Tensor::new(self.shape(*a).to_vec(), out)?;
                accumulate(grads, *a, || t);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *self.shape(*x).last().unwrap_or(&1);
                let gain_v = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut gg = vec![S::zero(); d];
                    let mut gb = vec![S::zero(); d];
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                            gb[j] += gr[j];
                        }
                    }
                    if self.rg(*gain) {
                        accumulate(grads, *gain, || Tensor::new(vec![d], gg).unwrap());
                    }
                    if self.rg(*bias) {
                        accumulate(grads, *bias, || Tensor::new(vec![d], gb).unwrap());
                    }
                }
                if self.rg(*x) {
                    let inv_d = S::one() / S::from_usize(d).unwrap();
                    let mut out = Vec::with_capacity(gd.len());
                    for ((gr, hr), &r) in gd.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let mut mean_gh = S::zero();
                        let mut mean_ghx = S::zero();
                        for j in 0..d {
                            let gh = gr[j] * gain_v[j];
                            mean_gh += gh;
                            mean_ghx += gh * hr[j];
                        }
                        mean_gh *= inv_d;
                        mean_ghx *= inv_d;
                        for j in 0..d {
                            let gh = gr[j] * gain_v[j];
                            out.push(r * (gh - mean_gh - hr[j] * mean_ghx));
                        }
                    }
                    let t = Tensor::new(self.shape(*x).to_vec(), out)?;
                    accumulate(grads, *x, || t);
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let data = xv.iter().zip(gd).map(|(&x, &q)| gelu_grad(x) * q).collect();
                let t = Tensor::new(self.shape(*a).to_vec(), data)?;
                accumulate(grads, *a, || t);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let data = y.iter().zip(gd).map(|(&t, &q)| (S::one() - t * t) * q).collect();
                let t = Tensor::new(self.shape(*a).to_vec(), data)?;
                accumulate(grads, *a, || t);
            }
            Op::IndexSelect { x, axis, indices } => {
                let shape = self.shape(*x).to_vec();
                let extent = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut out = vec![S::zero(); shape.iter().product()];
                let mut src = 0;
                for o in 0..outer {
                    for &i in indices {
                        let dst = (o * extent + i) * inner;
                        for (d, &v) in out[dst..dst + inner].iter_mut().zip(&gd[src..src + inner]) {
                            *d += v;
                        }
                        src += inner;
                    }
                }
                let t = Tensor::new(shape, out)?;
                accumulate(grads, *x, || t);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let t = g.slice_axis(*axis, start, start + len)?;
                        accumulate(grads, p, || t);
                    }
                    start += len;
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = self.value(*a).numel();
                let mut s = gd[0];
                if matches!(node.op, Op::Mean(_)) {
                    s /= S::from_usize(n.max(1)).unwrap();
                }
                accumulate(grads, *a, || Tensor::full(self.shape(*a), s));
            }
            Op::Abs(a) => {
                let xv = self.value(*a).data();
                let data = xv.iter().zip(gd).map(|(&x, &q)| sign(x) * q).collect();
                let t = Tensor::new(self.shape(*a).to_vec(), data)?;
                accumulate(grads, *a, || t);
            }
            Op::L1(p, t) => {
                let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                let n = pv.len().max(1);
                let scale = gd[0] / S::from_usize(n).unwrap();
                let diff_sign: Vec<S> = pv.iter().zip(tv).map(|(&a, &b)| sign(a - b) * scale).collect();
                if self.rg(*t) {
                    let neg = Tensor::new(self.shape(*t).to_vec(), diff_sign.iter().map(|&v| -v).collect())?;
                    accumulate(grads, *t, || neg);
                }
                if self.rg(*p) {
                    let pos = Tensor::new(self.shape(*p).to_vec(), diff_sign)?;
                    accumulate(grads, *p, || pos);
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, make: impl FnOnce() -> Tensor<S>) {
    let t = make();
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradients of all parameter leaves on `tape` into `store`.
    pub fn accumulate_into(&self, tape: &Tape<S>, store: &mut ParamStore<S>) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, self.grads[i].as_ref()) {
                if node.requires_grad {
                    store.accumulate_grad(id, g);
                }
            }
        }
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (a matrix index, b matrix index) per output matrix.
    batches: Vec<(usize, usize)>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands must have rank >= 2, got {:?} and {:?}", sa, sb),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {:?} · {:?} ({} vs {})", sa, sb, k, k2),
            ));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        // A shared rank-2 right operand: fold all of a's batches into rows.
        if bb.is_empty() {
            let rows: usize = ba.iter().product::<usize>() * m;
            let mut out_shape = ba.to_vec();
            out_shape.extend([m, n]);
            return Ok(Self {
                m: rows,
                k,
                n,
                out_shape,
                batches: vec![(0, 0)],
            });
        }
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut bc = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::shape(
                    "matmul",
                    format!("batch extents {:?} and {:?} do not broadcast", ba, bb),
                ));
            }
            bc.push(x.max(y));
        }
        let sa_str = super::strides_of(&pa);
        let sb_str = super::strides_of(&pb);
        let total: usize = bc.iter().product();
        let mut batches = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            let mut ao = 0;
            let mut bo = 0;
            for d in 0..rank {
                if pa[d] != 1 {
                    ao += idx[d] * sa_str[d];
                }
                if pb[d] != 1 {
                    bo += idx[d] * sb_str[d];
                }
            }
            batches.push((ao, bo));
            super::advance(&mut idx, &bc);
        }
        let mut out_shape = bc;
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            batches,
        })
    }

    fn out_numel(&self) -> usize {
        self.out_shape.iter().product()
    }
}
