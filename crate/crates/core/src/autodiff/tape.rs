use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::tensor::{inverse_axes, mm, mm_nt, mm_tn, permute_data, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Default LayerNorm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { a: usize, b: usize },
    MulConst { a: usize, c: Rc<Vec<S>> },
    Scale { a: usize, c: S },
    AddScalar { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Relu { a: usize },
    Gelu { a: usize },
    Softmax { a: usize },
    LogSoftmax { a: usize, allowed: Option<Rc<Vec<bool>>> },
    LayerNorm { x: usize, gain: usize, bias: usize, stats: Vec<(S, S)> },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Concat { parts: Vec<usize>, outer: usize, widths: Vec<usize> },
    Slice { a: usize, outer: usize, in_width: usize, start: usize, width: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    ReplaceRows { a: usize, fill: usize, rows: Rc<Vec<bool>> },
    Expand { a: usize, outer: usize, n: usize, inner: usize },
    Sum { a: usize },
    Mean { a: usize },
    L2NormalizeRows { a: usize, norms: Vec<S> },
    PickLast { a: usize, idx: Vec<usize> },
}

struct Node<S> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records operations in execution order for reverse-mode differentiation.
///
/// Nodes are appended only after their inputs, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not
    /// influence the loss, `None` if `v` does not require gradients.
    pub fn get(&self, v: Var<'_, S>) -> Option<Tensor<S>> {
        self.by_id(v.id)
    }

    pub(crate) fn by_id(&self, id: usize) -> Option<Tensor<S>> {
        let shape = &self.shapes[id];
        self.grads[id].as_ref().map(|g| Tensor::new(shape, g.clone()).expect("grad shape"))
    }

    pub(crate) fn take_by_id(&mut self, id: usize) -> Option<Tensor<S>> {
        let shape = self.shapes[id].clone();
        self.grads[id]
            .take()
            .map(|g| Tensor::new(&shape, g).expect("grad shape"))
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[loss.id] = Some(vec![S::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Nodes that require grad but were not reached get zeros.
        for (id, n) in nodes.iter().enumerate() {
            if n.requires_grad && grads[id].is_none() && id <= loss.id {
                grads[id] = Some(vec![S::zero(); n.value.numel()]);
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], id: usize, f: impl FnOnce(&mut [S])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![S::zero(); nodes[id].value.numel()]);
    f(slot);
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    let cdf = half * (S::one() + (x * S::FRAC_1_SQRT_2()).erf());
    let pdf = (-half * x * x).exp() * S::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn backward_node<S: Scalar>(nodes: &[Node<S>], id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            acc(grads, nodes, a, |ga| mm_nt(g, bv.data(), m, n, k, ga));
            acc(grads, nodes, b, |gb| mm_tn(av.data(), g, k, m, n, gb));
        }
        &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            acc(grads, nodes, a, |ga| {
                for t in 0..batch {
                    let gs = &g[t * m * n..(t + 1) * m * n];
                    let bs = &bv[t * k * n..(t + 1) * k * n];
                    let gas = &mut ga[t * m * k..(t + 1) * m * k];
                    if trans_b {
                        // b is [n×k]
                        mm(gs, bs, m, n, k, gas);
                    } else {
                        mm_nt(gs, bs, m, n, k, gas);
                    }
                }
            });
            acc(grads, nodes, b, |gb| {
                for t in 0..batch {
                    let gs = &g[t * m * n..(t + 1) * m * n];
                    let as_ = &av[t * m * k..(t + 1) * m * k];
                    let gbs = &mut gb[t * k * n..(t + 1) * k * n];
                    if trans_b {
                        // d(b)[n×k] = gᵀ·a
                        mm_tn(gs, as_, n, m, k, gbs);
                    } else {
                        mm_tn(as_, gs, k, m, n, gbs);
                    }
                }
            });
        }
        &Op::Add { a, b } => {
            acc(grads, nodes, a, |ga| add_into(ga, g));
            acc(grads, nodes, b, |gb| add_into(gb, g));
        }
        &Op::Sub { a, b } => {
            acc(grads, nodes, a, |ga| add_into(ga, g));
            acc(grads, nodes, b, |gb| {
                for (d, &s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            });
        }
        &Op::Mul { a, b } => {
            let av = Rc::clone(&nodes[a].value);
            let bv = Rc::clone(&nodes[b].value);
            acc(grads, nodes, a, |ga| {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *d += s * y;
                }
            });
            acc(grads, nodes, b, |gb| {
                for ((d, &s), &x) in gb.iter_mut().zip(g).zip(av.data()) {
                    *d += s * x;
                }
            });
        }
        &Op::AddBias { a, b } => {
            acc(grads, nodes, a, |ga| add_into(ga, g));
            acc(grads, nodes, b, |gb| {
                let w = gb.len();
                for row in g.chunks(w) {
                    add_into(gb, row);
                }
            });
        }
        Op::MulConst { a, c } => {
            acc(grads, nodes, *a, |ga| {
                for ((d, &s), &m) in ga.iter_mut().zip(g).zip(c.iter()) {
                    *d += s * m;
                }
            });
        }
        &Op::Scale { a, c } => {
            acc(grads, nodes, a, |ga| {
                for (d, &s) in ga.iter_mut().zip(g) {
                    *d += s * c;
                }
            });
        }
        &Op::AddScalar { a } | &Op::Reshape { a } => {
            acc(grads, nodes, a, |ga| add_into(ga, g));
        }
        &Op::Exp { a } => {
            acc(grads, nodes, a, |ga| {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += s * y;
                }
            });
        }
        &Op::Log { a } => {
            let av = Rc::clone(&nodes[a].value);
            acc(grads, nodes, a, |ga| {
                for ((d, &s), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                    *d += s / x;
                }
            });
        }
        &Op::Relu { a } => {
            let av = Rc::clone(&nodes[a].value);
            acc(grads, nodes, a, |ga| {
                for ((d, &s), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                    if x > S::zero() {
                        *d += s;
                    }
                }
            });
        }
        &Op::Gelu { a } => {
            let av = Rc::clone(&nodes[a].value);
            acc(grads, nodes, a, |ga| {
                for ((d, &s), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                    *d += s * gelu_grad(x);
                }
            });
        }
        &Op::Softmax { a } => {
            let w = *out.shape().last().unwrap_or(&1);
            acc(grads, nodes, a, |ga| {
                for ((gr, yr), dr) in g.chunks(w).zip(out.data().chunks(w)).zip(ga.chunks_mut(w)) {
                    let dot: S = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    for ((d, &s), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += y * (s - dot);
                    }
                }
            });
        }
        Op::LogSoftmax { a, allowed } => {
            let w = *out.shape().last().unwrap_or(&1);
            acc(grads, nodes, *a, |ga| {
                for (r, ((gr, yr), dr)) in g
                    .chunks(w)
                    .zip(out.data().chunks(w))
                    .zip(ga.chunks_mut(w))
                    .enumerate()
                {
                    let ok = |j: usize| allowed.as_ref().is_none_or(|m| m[r * w + j]);
                    let total: S = (0..w).filter(|&j| ok(j)).map(|j| gr[j]).sum();
                    for j in 0..w {
                        if ok(j) {
                            dr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, stats } => {
            let xv = Rc::clone(&nodes[*x].value);
            let gv = Rc::clone(&nodes[*gain].value);
            let d = gv.numel();
            let dn = S::from_usize(d).unwrap();
            acc(grads, nodes, *gain, |gg| {
                for ((gr, xr), &(mu, rstd)) in g.chunks(d).zip(xv.data().chunks(d)).zip(stats) {
                    for j in 0..d {
                        gg[j] += gr[j] * (xr[j] - mu) * rstd;
                    }
                }
            });
            acc(grads, nodes, *bias, |gb| {
                for gr in g.chunks(d) {
                    add_into(gb, gr);
                }
            });
            acc(grads, nodes, *x, |gx| {
                let mut dxhat = vec![S::zero(); d];
                for (((gr, xr), dr), &(mu, rstd)) in g
                    .chunks(d)
                    .zip(xv.data().chunks(d))
                    .zip(gx.chunks_mut(d))
                    .zip(stats)
                {
                    let mut mean_d = S::zero();
                    let mut mean_dx = S::zero();
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv.data()[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * (xr[j] - mu) * rstd;
                    }
                    mean_d /= dn;
                    mean_dx /= dn;
                    for j in 0..d {
                        let xhat = (xr[j] - mu) * rstd;
                        dr[j] += rstd * (dxhat[j] - mean_d - xhat * mean_dx);
                    }
                }
            });
        }
        Op::Permute { a, axes } => {
            let back = permute_data(g, out.shape(), &inverse_axes(axes));
            acc(grads, nodes, *a, |ga| add_into(ga, &back));
        }
        Op::Concat { parts, outer, widths } => {
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                acc(grads, nodes, p, |gp| {
                    for o in 0..*outer {
                        add_into(
                            &mut gp[o * w..(o + 1) * w],
                            &g[o * total + offset..o * total + offset + w],
                        );
                    }
                });
                offset += w;
            }
        }
        &Op::Slice { a, outer, in_width, start, width } => {
            acc(grads, nodes, a, |ga| {
                for o in 0..outer {
                    add_into(
                        &mut ga[o * in_width + start..o * in_width + start + width],
                        &g[o * width..(o + 1) * width],
                    );
                }
            });
        }
        Op::GatherRows { a, idx } => {
            let w = *out.shape().last().unwrap_or(&1);
            acc(grads, nodes, *a, |ga| {
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut ga[src * w..(src + 1) * w], &g[r * w..(r + 1) * w]);
                }
            });
        }
        Op::ReplaceRows { a, fill, rows } => {
            let w = nodes[*fill].value.numel();
            acc(grads, nodes, *a, |ga| {
                for (r, &replaced) in rows.iter().enumerate() {
                    if !replaced {
                        add_into(&mut ga[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                }
            });
            acc(grads, nodes, *fill, |gf| {
                for (r, &replaced) in rows.iter().enumerate() {
                    if replaced {
                        add_into(gf, &g[r * w..(r + 1) * w]);
                    }
                }
            });
        }
        &Op::Expand { a, outer, n, inner } => {
            acc(grads, nodes, a, |ga| {
                for o in 0..outer {
                    for r in 0..n {
                        let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                        add_into(&mut ga[o * inner..(o + 1) * inner], src);
                    }
                }
            });
        }
        &Op::Sum { a } => {
            let s = g[0];
            acc(grads, nodes, a, |ga| ga.iter_mut().for_each(|d| *d += s));
        }
        &Op::Mean { a } => {
            let numel = nodes[a].value.numel();
            let s = g[0] / S::from_usize(numel).unwrap();
            acc(grads, nodes, a, |ga| ga.iter_mut().for_each(|d| *d += s));
        }
        Op::L2NormalizeRows { a, norms } => {
            let w = *out.shape().last().unwrap_or(&1);
            acc(grads, nodes, *a, |ga| {
                for (((gr, yr), dr), &nrm) in g
                    .chunks(w)
                    .zip(out.data().chunks(w))
                    .zip(ga.chunks_mut(w))
                    .zip(norms)
                {
                    let dot: S = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    for ((d, &s), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += (s - y * dot) / nrm;
                    }
                }
            });
        }
        Op::PickLast { a, idx } => {
            let w = *nodes[*a].value.shape().last().unwrap_or(&1);
            acc(grads, nodes, *a, |ga| {
                for (r, &j) in idx.iter().enumerate() {
                    ga[r * w + j] += g[r];
                }
            });
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    /// Current value (shared with the tape).
    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> S {
        self.value().item()
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        let nodes: Ref<'_, Vec<Node<S>>> = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    fn unary(&self, value: Tensor<S>, op: Op<S>) -> Var<'t, S> {
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: Var<'t, S>, value: Tensor<S>, op: Op<S>) -> Var<'t, S> {
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    /// `self[.., k] · w[k, n]`, treating all leading axes as rows.
    pub fn matmul(&self, w: Var<'t, S>) -> Result<Var<'t, S>> {
        let a = self.value();
        let b = w.value();
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.is_empty() || bsh.len() != 2 || *ash.last().unwrap() != bsh[0] {
            return shape_err("matmul", ash, bsh);
        }
        let (k, n) = (bsh[0], bsh[1]);
        let m = a.numel() / k.max(1);
        let mut out = vec![S::zero(); m * n];
        mm(a.data(), b.data(), m, k, n, &mut out);
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        Ok(self.binary(w, value, Op::MatMul { a: self.id, b: w.id, m, k, n }))
    }

    /// Batched product over all leading axes: `[.., m, k] · [.., k, n]`, or
    /// `[.., m, k] · [.., n, k]ᵀ` when `trans_b`.
    pub fn bmm(&self, other: Var<'t, S>, trans_b: bool) -> Result<Var<'t, S>> {
        let a = self.value();
        let b = other.value();
        let (ash, bsh) = (a.shape(), b.shape());
        let nd = ash.len();
        if nd < 2 || bsh.len() != nd || ash[..nd - 2] != bsh[..nd - 2] {
            return shape_err("bmm", ash, bsh);
        }
        let (m, k) = (ash[nd - 2], ash[nd - 1]);
        let (kb, n) = if trans_b {
            (bsh[nd - 1], bsh[nd - 2])
        } else {
            (bsh[nd - 2], bsh[nd - 1])
        };
        if k != kb {
            return shape_err("bmm", ash, bsh);
        }
        let batch: usize = ash[..nd - 2].iter().product();
        let mut out = vec![S::zero(); batch * m * n];
        for t in 0..batch {
            let as_ = &a.data()[t * m * k..(t + 1) * m * k];
            let bs = &b.data()[t * k * n..(t + 1) * k * n];
            let os = &mut out[t * m * n..(t + 1) * m * n];
            if trans_b {
                mm_nt(as_, bs, m, k, n, os);
            } else {
                mm(as_, bs, m, k, n, os);
            }
        }
        let mut shape = ash[..nd - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.binary(
            other,
            value,
            Op::BatchMatMul { a: self.id, b: other.id, batch, m, k, n, trans_b },
        ))
    }

    fn zip_same(&self, other: Var<'t, S>, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return shape_err(name, a.shape(), b.shape());
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data)
    }

    pub fn add(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add { a: self.id, b: other.id }))
    }

    pub fn sub(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.zip_same(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub { a: self.id, b: other.id }))
    }

    pub fn mul(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul { a: self.id, b: other.id }))
    }

    /// Adds `bias` broadcast over leading axes; `bias`'s shape must equal the
    /// trailing axes of `self`.
    pub fn add_bias(&self, bias: Var<'t, S>) -> Result<Var<'t, S>> {
        let a = self.value();
        let b = bias.value();
        let (ash, bsh) = (a.shape(), b.shape());
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
            return shape_err("add_bias", ash, bsh);
        }
        let w = b.numel();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(w) {
            add_into(row, b.data());
        }
        let value = Tensor::new(ash, data)?;
        Ok(self.binary(bias, value, Op::AddBias { a: self.id, b: bias.id }))
    }

    /// Elementwise product with a constant tensor of identical shape.
    pub fn mul_const(&self, c: &Tensor<S>) -> Result<Var<'t, S>> {
        let a = self.value();
        if a.shape() != c.shape() {
            return shape_err("mul_const", a.shape(), c.shape());
        }
        let data = a.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(a.shape(), data)?;
        Ok(self.unary(value, Op::MulConst { a: self.id, c: Rc::new(c.data().to_vec()) }))
    }

    pub fn scale(&self, c: S) -> Var<'t, S> {
        let v = self.with_value(|t| t.scale(c));
        self.unary(v, Op::Scale { a: self.id, c })
    }

    pub fn neg(&self) -> Var<'t, S> {
        self.scale(-S::one())
    }

    pub fn add_scalar(&self, c: S) -> Var<'t, S> {
        let v = self.with_value(|t| t.map(|x| x + c));
        self.unary(v, Op::AddScalar { a: self.id })
    }

    pub fn exp(&self) -> Var<'t, S> {
        let v = self.with_value(|t| t.map(S::exp));
        self.unary(v, Op::Exp { a: self.id })
    }

    pub fn ln(&self) -> Var<'t, S> {
        let v = self.with_value(|t| t.map(S::ln));
        self.unary(v, Op::Log { a: self.id })
    }

    pub fn square(&self) -> Var<'t, S> {
        self.mul(*self).expect("same shape")
    }

    pub fn relu(&self) -> Var<'t, S> {
        let v = self.with_value(|t| t.map(|x| if x > S::zero() { x } else { S::zero() }));
        self.unary(v, Op::Relu { a: self.id })
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Var<'t, S> {
        let v = self.with_value(|t| t.map(gelu));
        self.unary(v, Op::Gelu { a: self.id })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t, S> {
        let v = self.with_value(|t| softmax_rows(t, None));
        self.unary(v, Op::Softmax { a: self.id })
    }

    /// Softmax over the last axis where `key_mask[g·w + j] == false` removes
    /// key `j` for every row in group `g`; a group spans `rows_per_group`
    /// consecutive rows. Removed keys get weight exactly zero; rows with no
    /// admissible key are all-zero.
    pub fn masked_softmax(&self, key_mask: Rc<Vec<bool>>, rows_per_group: usize) -> Result<Var<'t, S>> {
        let a = self.value();
        let w = *a.shape().last().unwrap_or(&1);
        let rows = a.numel() / w.max(1);
        if rows_per_group == 0 || !rows.is_multiple_of(rows_per_group) || key_mask.len() != rows / rows_per_group * w {
            return Err(Error::InvalidArgument(format!(
                "key mask of length {} does not fit logits {:?} with {rows_per_group} rows per group",
                key_mask.len(),
                a.shape()
            )));
        }
        let v = softmax_rows(&a, Some((&key_mask, rows_per_group)));
        Ok(self.unary(v, Op::Softmax { a: self.id }))
    }

    /// Log-softmax over the last axis. With `allowed`, entries marked false are
    /// excluded from the normalizer and their output is 0 with no gradient.
    pub fn log_softmax(&self, allowed: Option<Rc<Vec<bool>>>) -> Result<Var<'t, S>> {
        let a = self.value();
        if let Some(m) = &allowed {
            if m.len() != a.numel() {
                return Err(Error::InvalidArgument("log_softmax mask length".into()));
            }
        }
        let w = *a.shape().last().unwrap_or(&1);
        let mut out = vec![S::zero(); a.numel()];
        for (r, (xr, or)) in a.data().chunks(w).zip(out.chunks_mut(w)).enumerate() {
            let ok = |j: usize| allowed.as_ref().is_none_or(|m| m[r * w + j]);
            let mx = (0..w).filter(|&j| ok(j)).map(|j| xr[j]).fold(S::neg_infinity(), S::max);
            if mx == S::neg_infinity() {
                continue;
            }
            let lse = mx + (0..w).filter(|&j| ok(j)).map(|j| (xr[j] - mx).exp()).sum::<S>().ln();
            for j in 0..w {
                if ok(j) {
                    or[j] = xr[j] - lse;
                }
            }
        }
        let value = Tensor::new(a.shape(), out)?;
        Ok(self.unary(value, Op::LogSoftmax { a: self.id, allowed }))
    }

    /// LayerNorm over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&self, gain: Var<'t, S>, bias: Var<'t, S>, eps: S) -> Result<Var<'t, S>> {
        let x = self.value();
        let gv = gain.value();
        let bv = bias.value();
        let d = *x.shape().last().unwrap_or(&0);
        if gv.shape() != [d] || bv.shape() != [d] {
            return shape_err("layer_norm", x.shape(), gv.shape());
        }
        let dn = S::from_usize(d).unwrap();
        let mut out = vec![S::zero(); x.numel()];
        let mut stats = Vec::with_capacity(x.numel() / d.max(1));
        for (xr, or) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            let mu = xr.iter().copied().sum::<S>() / dn;
            let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / dn;
            let rstd = S::one() / (var + eps).sqrt();
            for j in 0..d {
                or[j] = (xr[j] - mu) * rstd * gv.data()[j] + bv.data()[j];
            }
            stats.push((mu, rstd));
        }
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.tape.requires(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, stats },
            rg,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, S>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape { a: self.id }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, S>> {
        let a = self.value();
        let mut seen = vec![false; a.ndim()];
        if axes.len() != a.ndim() || axes.iter().any(|&x| x >= a.ndim() || std::mem::replace(&mut seen[x], true)) {
            return shape_err("permute", a.shape(), axes);
        }
        let data = permute_data(a.data(), a.shape(), axes);
        let shape: Vec<usize> = axes.iter().map(|&x| a.shape()[x]).collect();
        let value = Tensor::new(&shape, data)?;
        Ok(self.unary(value, Op::Permute { a: self.id, axes: axes.to_vec() }))
    }

    /// Transpose of the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'t, S>> {
        let nd = self.shape().len();
        if nd < 2 {
            return shape_err("transpose_last", &self.shape(), &[]);
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor<S>>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return shape_err("concat", &base, &[axis]);
        }
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return shape_err("concat", &base, s);
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let value = Tensor::new(&shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(value, Op::Concat { parts: ids, outer, widths }, rg))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, S>> {
        let a = self.value();
        let sh = a.shape();
        if axis >= sh.len() || start + len > sh[axis] {
            return shape_err("slice", sh, &[axis, start, len]);
        }
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let in_width = sh[axis] * inner;
        let width = len * inner;
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            data.extend_from_slice(&a.data()[o * in_width + start * inner..o * in_width + start * inner + width]);
        }
        let mut shape = sh.to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.unary(value, Op::Slice { a: self.id, outer, in_width, start: start * inner, width }))
    }

    /// Selects rows of a `[R, W]` var.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t, S>> {
        let a = self.value();
        if a.ndim() != 2 || idx.iter().any(|&i| i >= a.shape()[0]) {
            return shape_err("gather_rows", a.shape(), idx);
        }
        let w = a.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&a.data()[i * w..(i + 1) * w]);
        }
        let value = Tensor::new(&[idx.len(), w], data)?;
        Ok(self.unary(value, Op::GatherRows { a: self.id, idx: idx.to_vec() }))
    }

    /// Replaces rows of a `[R, W]` var flagged in `rows` with `fill` (`[W]`).
    pub fn replace_rows(&self, rows: Rc<Vec<bool>>, fill: Var<'t, S>) -> Result<Var<'t, S>> {
        let a = self.value();
        let f = fill.value();
        if a.ndim() != 2 || rows.len() != a.shape()[0] || f.shape() != [a.shape()[1]] {
            return shape_err("replace_rows", a.shape(), f.shape());
        }
        let w = a.shape()[1];
        let mut data = a.data().to_vec();
        for (r, &rep) in rows.iter().enumerate() {
            if rep {
                data[r * w..(r + 1) * w].copy_from_slice(f.data());
            }
        }
        let value = Tensor::new(a.shape(), data)?;
        Ok(self.binary(fill, value, Op::ReplaceRows { a: self.id, fill: fill.id, rows }))
    }

    /// Inserts a new axis at `axis` and repeats the var `n` times along it.
    pub fn expand(&self, axis: usize, n: usize) -> Result<Var<'t, S>> {
        let a = self.value();
        let sh = a.shape();
        if axis > sh.len() {
            return shape_err("expand", sh, &[axis]);
        }
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                data.extend_from_slice(&a.data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = sh.to_vec();
        shape.insert(axis, n);
        let value = Tensor::new(&shape, data)?;
        Ok(self.unary(value, Op::Expand { a: self.id, outer, n, inner }))
    }

    pub fn sum(&self) -> Var<'t, S> {
        let v = Tensor::scalar(self.with_value(|t| t.sum()));
        self.unary(v, Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> Var<'t, S> {
        let v = self.with_value(|t| Tensor::scalar(t.sum() / S::from_usize(t.numel()).unwrap()));
        self.unary(v, Op::Mean { a: self.id })
    }

    /// Divides every row (last axis) by its L2 norm.
    pub fn l2_normalize_rows(&self) -> Var<'t, S> {
        let a = self.value();
        let w = *a.shape().last().unwrap_or(&1);
        let mut data = a.data().to_vec();
        let mut norms = Vec::with_capacity(a.numel() / w.max(1));
        for row in data.chunks_mut(w) {
            let nrm = row.iter().map(|&v| v * v).sum::<S>().sqrt().max(S::min_positive_value());
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        let value = Tensor::new(a.shape(), data).expect("same shape");
        self.unary(value, Op::L2NormalizeRows { a: self.id, norms })
    }

    /// `out[r] = self[r, idx[r]]` for a `[R, C]` var.
    pub fn pick_last(&self, idx: &[usize]) -> Result<Var<'t, S>> {
        let a = self.value();
        if a.ndim() != 2 || idx.len() != a.shape()[0] {
            return shape_err("pick_last", a.shape(), &[idx.len()]);
        }
        let c = a.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::InvalidArgument(format!("index {bad} out of range for {c} columns")));
        }
        let data = idx.iter().enumerate().map(|(r, &j)| a.data()[r * c + j]).collect();
        let value = Tensor::new(&[idx.len()], data)?;
        Ok(self.unary(value, Op::PickLast { a: self.id, idx: idx.to_vec() }))
    }
}

/// Exact GELU on a scalar.
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    half * x * (S::one() + (x * S::FRAC_1_SQRT_2()).erf())
}

fn softmax_rows<S: Scalar>(t: &Tensor<S>, mask: Option<(&[bool], usize)>) -> Tensor<S> {
    let w = *t.shape().last().unwrap_or(&1);
    let mut out = vec![S::zero(); t.numel()];
    for (r, (xr, or)) in t.data().chunks(w).zip(out.chunks_mut(w)).enumerate() {
        let keep = |j: usize| mask.is_none_or(|(m, per)| m[(r / per) * w + j]);
        let mx = (0..w).filter(|&j| keep(j)).map(|j| xr[j]).fold(S::neg_infinity(), S::max);
        if mx == S::neg_infinity() {
            continue;
        }
        let mut z = S::zero();
        for j in 0..w {
            if keep(j) {
                let e = (xr[j] - mx).exp();
                or[j] = e;
                z += e;
            }
        }
        or.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(t.shape(), out).expect("same shape")
}

