//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed on the
//! spot and the tape keeps just enough to run the chain rule backwards.
//! Nodes that do not depend on any differentiable leaf are stored as
//! constants, so inference-only graphs carry no backward state.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, Padding, PAD_INDEX};
use crate::tensor::{numel_of, split_axis, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Abs(usize),
    Clamp(usize, f64, f64),
    Minimum(usize, usize),
    Maximum(usize, usize),
    BroadcastTo(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow(usize, usize, usize),
    SumAll(usize),
    SumAxis(usize, usize),
    MaxAxis(usize, usize, Vec<u32>),
    Softmax(usize, usize),
    MatMul(usize, usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, geo: ConvGeometry },
    AvgPool(usize, usize),
    Upsample(usize, usize),
    MinFilter(usize, Vec<u32>),
    GridSample(usize, usize, Padding),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: BTreeMap<String, usize>,
}

/// An autodiff tape. Cheap to clone; clones share the same tape.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<Inner>>,
}

/// A handle to one value on a [`Graph`].
#[derive(Clone)]
pub struct Var {
    id: usize,
    graph: Graph,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every differentiable leaf.
pub struct Gradients {
    leaves: BTreeMap<usize, Tensor>,
    params: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn wrt(&self, var: &Var) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|id| self.leaves.get(id))
    }

    /// Parameter gradients keyed by name; parameters the loss does not
    /// depend on are absent.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(name, id)| self.leaves.get(id).map(|g| (name.as_str(), g)))
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (a, b) = (pad(a), pad(b));
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `out_shape`, the flat source index in `in_shape`
/// (same rank, broadcast dims of size 1).
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let in_strides: Vec<usize> = strides(in_shape)
        .into_iter()
        .zip(in_shape)
        .map(|(s, &d)| if d == 1 { 0 } else { s })
        .collect();
    let n = numel_of(out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(n);
    let mut src = 0usize;
    for _ in 0..n {
        out.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += in_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= in_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn permute_map(in_shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel_of(in_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= perm_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let op = if needs_grad { op } else { Op::Leaf };
        inner.nodes.push(Node { value, op, needs_grad });
        Var { id, graph: self.clone() }
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A named trainable leaf; repeated calls with the same name return the
    /// same node.
    pub fn param(&self, name: &str, value: &Tensor) -> Var {
        if let Some(&id) = self.inner.borrow().params.get(name) {
            return Var { id, graph: self.clone() };
        }
        let v = self.leaf(value.clone());
        self.inner.borrow_mut().params.insert(name.to_string(), v.id);
        v
    }

    /// A named parameter bound as a constant (frozen weights).
    pub fn frozen(&self, value: &Tensor) -> Var {
        self.constant(value.clone())
    }

    /// Run the chain rule from a scalar `root`.
    pub fn backward(&self, root: &Var) -> Result<Gradients> {
        let inner = self.inner.borrow();
        let root_node = &inner.nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        let mut leaves = BTreeMap::new();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let val = |i: usize| inner.nodes[i].value.data();
            let needs = |i: usize| inner.nodes[i].needs_grad;
            let mut acc = |i: usize, delta: Vec<f64>| {
                if !inner.nodes[i].needs_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => {
                        for (e, d) in existing.iter_mut().zip(delta) {
                            *e += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            let out = node.value.data();
            match &node.op {
                Op::Leaf => {
                    leaves.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                &Op::Add(a, b) => {
                    if needs(b) {
                        acc(b, g.clone());
                    }
                    acc(a, g);
                }
                &Op::Sub(a, b) => {
                    if needs(b) {
                        acc(b, g.iter().map(|v| -v).collect());
                    }
                    acc(a, g);
                }
                &Op::Mul(a, b) => {
                    if needs(a) {
                        acc(a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                    }
                    if needs(b) {
                        acc(b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
                    }
                }
                &Op::Div(a, b) => {
                    if needs(a) {
                        acc(a, g.iter().zip(val(b)).map(|(g, y)| g / y).collect());
                    }
                    if needs(b) {
                        acc(
                            b,
                            g.iter()
                                .zip(out)
                                .zip(val(b))
                                .map(|((g, q), y)| -g * q / y)
                                .collect(),
                        );
                    }
                }
                &Op::Scale(a, s) => acc(a, g.iter().map(|v| v * s).collect()),
                &Op::Offset(a) => acc(a, g),
                &Op::Exp(a) => acc(a, g.iter().zip(out).map(|(g, e)| g * e).collect()),
                &Op::Ln(a) => acc(a, g.iter().zip(val(a)).map(|(g, x)| g / x).collect()),
                &Op::Sqrt(a) => acc(a, g.iter().zip(out).map(|(g, s)| 0.5 * g / s).collect()),
                &Op::Relu(a) => acc(
                    a,
                    g.iter().zip(val(a)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                ),
                &Op::LeakyRelu(a, slope) => acc(
                    a,
                    g.iter()
                        .zip(val(a))
                        .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                        .collect(),
                ),
                &Op::Sigmoid(a) => acc(a, g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect()),
                &Op::Abs(a) => acc(a, g.iter().zip(val(a)).map(|(g, &x)| g * x.signum() * (x != 0.0) as u8 as f64).collect()),
                &Op::Clamp(a, lo, hi) => acc(
                    a,
                    g.iter()
                        .zip(val(a))
                        .map(|(g, &x)| if x >= lo && x <= hi { *g } else { 0.0 })
                        .collect(),
                ),
                &Op::Minimum(a, b) | &Op::Maximum(a, b) => {
                    let is_min = matches!(node.op, Op::Minimum(..));
                    let (xa, xb) = (val(a), val(b));
                    let mut ga = vec![0.0; g.len()];
                    let mut gb = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        let a_wins = if is_min { xa[i] < xb[i] } else { xa[i] > xb[i] };
                        if xa[i] == xb[i] {
                            ga[i] = 0.5 * g[i];
                            gb[i] = 0.5 * g[i];
                        } else if a_wins {
                            ga[i] = g[i];
                        } else {
                            gb[i] = g[i];
                        }
                    }
                    if needs(b) {
                        acc(b, gb);
                    }
                    acc(a, ga);
                }
                &Op::BroadcastTo(a) => {
                    let in_shape = inner.nodes[a].value.shape();
                    let mut ga = vec![0.0; numel_of(in_shape)];
                    for (o, src) in broadcast_map(in_shape, node.value.shape()).into_iter().enumerate() {
                        ga[src] += g[o];
                    }
                    acc(a, ga);
                }
                &Op::Reshape(a) => acc(a, g),
                Op::Permute(a, perm) => {
                    let (_, map) = permute_map(inner.nodes[*a].value.shape(), perm);
                    let mut ga = vec![0.0; g.len()];
                    for (o, src) in map.into_iter().enumerate() {
                        ga[src] = g[o];
                    }
                    acc(*a, ga);
                }
                Op::Concat(parts, axis) => {
                    let (outer, total, inner_sz) = split_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let len = inner.nodes[p].value.shape()[*axis];
                        if needs(p) {
                            let mut gp = Vec::with_capacity(outer * len * inner_sz);
                            for o in 0..outer {
                                let s = (o * total + offset) * inner_sz;
                                gp.extend_from_slice(&g[s..s + len * inner_sz]);
                            }
                            acc(p, gp);
                        }
                        offset += len;
                    }
                }
                &Op::Narrow(a, axis, start) => {
                    let in_shape = inner.nodes[a].value.shape();
                    let (outer, total, inner_sz) = split_axis(in_shape, axis);
                    let len = node.value.shape()[axis];
                    let mut ga = vec![0.0; numel_of(in_shape)];
                    for o in 0..outer {
                        let d = (o * total + start) * inner_sz;
                        ga[d..d + len * inner_sz]
                            .copy_from_slice(&g[o * len * inner_sz..(o + 1) * len * inner_sz]);
                    }
                    acc(a, ga);
                }
                &Op::SumAll(a) => acc(a, vec![g[0]; inner.nodes[a].value.numel()]),
                &Op::SumAxis(a, axis) => {
                    let (outer, len, inner_sz) = split_axis(inner.nodes[a].value.shape(), axis);
                    let mut ga = vec![0.0; outer * len * inner_sz];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner_sz {
                                ga[(o * len + l) * inner_sz + i] = g[o * inner_sz + i];
                            }
                        }
                    }
                    acc(a, ga);
                }
                Op::MaxAxis(a, axis, arg) => {
                    let (outer, len, inner_sz) = split_axis(inner.nodes[*a].value.shape(), *axis);
                    let mut ga = vec![0.0; outer * len * inner_sz];
                    for o in 0..outer {
                        for i in 0..inner_sz {
                            let k = o * inner_sz + i;
                            ga[(o * len + arg[k] as usize) * inner_sz + i] += g[k];
                        }
                    }
                    acc(*a, ga);
                }
                &Op::Softmax(a, axis) => {
                    let (outer, len, inner_sz) = split_axis(node.value.shape(), axis);
                    let mut ga = vec![0.0; g.len()];
                    for o in 0..outer {
                        for i in 0..inner_sz {
                            let at = |l: usize| (o * len + l) * inner_sz + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * out[at(l)]).sum();
                            for l in 0..len {
                                ga[at(l)] = out[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                    acc(a, ga);
                }
                &Op::MatMul(a, b) => {
                    let sa = inner.nodes[a].value.shape();
                    let sb = inner.nodes[b].value.shape();
                    let dims = (sa[0], sa[1], sa[2], sb[2]);
                    let (ga, gb) = kernels::batched_matmul_backward(val(a), val(b), &g, dims);
                    if needs(b) {
                        acc(b, gb);
                    }
                    acc(a, ga);
                }
                &Op::Conv2d { x, w, b, geo } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(
                        &inner.nodes[x].value,
                        &inner.nodes[w].value,
                        geo,
                        &g,
                        needs(x),
                    );
                    if let Some(gx) = gx {
                        acc(x, gx);
                    }
                    acc(w, gw);
                    if let Some(b) = b {
                        acc(b, gb);
                    }
                }
                &Op::AvgPool(a, k) => {
                    acc(a, kernels::avg_pool_backward(inner.nodes[a].value.shape(), k, &g))
                }
                &Op::Upsample(a, s) => {
                    acc(a, kernels::upsample_nearest_backward(inner.nodes[a].value.shape(), s, &g))
                }
                Op::MinFilter(a, arg) => {
                    let mut ga = vec![0.0; g.len()];
                    for (o, &src) in arg.iter().enumerate() {
                        if src != PAD_INDEX {
                            ga[src as usize] += g[o];
                        }
                    }
                    acc(*a, ga);
                }
                &Op::GridSample(img, grid, padding) => {
                    let (gi, gg) = kernels::grid_sample_backward(
                        &inner.nodes[img].value,
                        &inner.nodes[grid].value,
                        padding,
                        &g,
                    );
                    if needs(grid) {
                        acc(grid, gg);
                    }
                    acc(img, gi);
                }
            }
        }
        Ok(Gradients { leaves, params: inner.params.clone() })
    }
}

impl Var {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].needs_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var {
        self.graph.constant(self.value())
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value().map(f);
        self.graph.push(v, op, self.needs_grad())
    }

    fn same_shape_binary(&self, rhs: &Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let v = self.value().zip_map(&rhs.value(), f).expect("shapes aligned by caller");
        self.graph.push(v, op, self.needs_grad() || rhs.needs_grad())
    }

    fn aligned(&self, rhs: &Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa == sb {
            return Ok((self.clone(), rhs.clone()));
        }
        let target = broadcast_shape(&sa, &sb)?;
        Ok((self.broadcast_to(&target)?, rhs.broadcast_to(&target)?))
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        let (a, b) = self.aligned(rhs)?;
        Ok(a.same_shape_binary(&b, |x, y| x + y, Op::Add(a.id, b.id)))
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        let (a, b) = self.aligned(rhs)?;
        Ok(a.same_shape_binary(&b, |x, y| x - y, Op::Sub(a.id, b.id)))
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        let (a, b) = self.aligned(rhs)?;
        Ok(a.same_shape_binary(&b, |x, y| x * y, Op::Mul(a.id, b.id)))
    }

    pub fn div(&self, rhs: &Var) -> Result<Var> {
        let (a, b) = self.aligned(rhs)?;
        Ok(a.same_shape_binary(&b, |x, y| x / y, Op::Div(a.id, b.id)))
    }

    pub fn minimum(&self, rhs: &Var) -> Result<Var> {
        let (a, b) = self.aligned(rhs)?;
        Ok(a.same_shape_binary(&b, f64::min, Op::Minimum(a.id, b.id)))
    }

    pub fn maximum(&self, rhs: &Var) -> Result<Var> {
        let (a, b) = self.aligned(rhs)?;
        Ok(a.same_shape_binary(&b, f64::max, Op::Maximum(a.id, b.id)))
    }

    pub fn scale(&self, s: f64) -> Var {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn offset(&self, c: f64) -> Var {
        self.unary(Op::Offset(self.id), |x| x + c)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    /// `c - self`
    pub fn rsub(&self, c: f64) -> Var {
        self.neg().offset(c)
    }

    pub fn exp(&self) -> Var {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(&self) -> Var {
        self.same_shape_binary(self, |x, y| x * y, Op::Mul(self.id, self.id))
    }

    pub fn relu(&self) -> Var {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        self.unary(Op::LeakyRelu(self.id, slope), move |x| if x > 0.0 { x } else { x * slope })
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(Op::Sigmoid(self.id), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn abs(&self) -> Var {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp(self.id, lo, hi), move |x| x.clamp(lo, hi))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        let mut src = self.shape();
        if src == shape {
            return Ok(self.clone());
        }
        if src.len() > shape.len() {
            return Err(Error::shape(format!("cannot broadcast {src:?} to {shape:?}")));
        }
        let base = if src.len() < shape.len() {
            let mut padded = vec![1; shape.len() - src.len()];
            padded.extend_from_slice(&src);
            src = padded;
            self.reshape(&src)?
        } else {
            self.clone()
        };
        if src.iter().zip(shape).any(|(&s, &t)| s != t && s != 1) {
            return Err(Error::shape(format!("cannot broadcast {src:?} to {shape:?}")));
        }
        let value = base.value();
        let data = value.data();
        let out: Vec<f64> = broadcast_map(&src, shape).into_iter().map(|i| data[i]).collect();
        Ok(self.graph.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::BroadcastTo(base.id),
            base.needs_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().reshape(shape)?;
        Ok(self.graph.push(v, Op::Reshape(self.id), self.needs_grad()))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let (out_shape, map) = permute_map(&shape, perm);
        let value = self.value();
        let data = value.data();
        let out = map.into_iter().map(|i| data[i]).collect();
        Ok(self.graph.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute(self.id, perm.to_vec()),
            self.needs_grad(),
        ))
    }

    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = first.shape();
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::shape(format!("concat axis {axis}: {base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner_sz) = split_axis(&shape, axis);
        let values: Vec<Tensor> = parts.iter().map(Var::value).collect();
        let mut out = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner_sz;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let needs = parts.iter().any(Var::needs_grad);
        Ok(first.graph.push(
            Tensor::from_parts(shape, out),
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            needs,
        ))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!("narrow({axis}, {start}, {len}) on {shape:?}")));
        }
        let (outer, total, inner_sz) = split_axis(&shape, axis);
        let value = self.value();
        let mut out = Vec::with_capacity(outer * len * inner_sz);
        for o in 0..outer {
            let s = (o * total + start) * inner_sz;
            out.extend_from_slice(&value.data()[s..s + len * inner_sz]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.graph.push(
            Tensor::from_parts(out_shape, out),
            Op::Narrow(self.id, axis, start),
            self.needs_grad(),
        ))
    }

    pub fn sum_all(&self) -> Var {
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), Op::SumAll(self.id), self.needs_grad())
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!("sum over axis {axis} of {shape:?}")));
        }
        let (outer, len, inner_sz) = split_axis(&shape, axis);
        let value = self.value();
        let d = value.data();
        let mut out = vec![0.0; outer * inner_sz];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner_sz {
                    out[o * inner_sz + i] += d[(o * len + l) * inner_sz + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.graph.push(
            Tensor::from_parts(out_shape, out),
            Op::SumAxis(self.id, axis),
            self.needs_grad(),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        let n = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    /// Maximum over `axis`, keeping it as a size-1 dimension. Ties resolve to
    /// the first index.
    pub fn max_axis(&self, axis: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!("max over axis {axis} of {shape:?}")));
        }
        let (outer, len, inner_sz) = split_axis(&shape, axis);
        let value = self.value();
        let d = value.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner_sz];
        let mut arg = vec![0u32; outer * inner_sz];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner_sz {
                    let v = d[(o * len + l) * inner_sz + i];
                    let k = o * inner_sz + i;
                    if v > out[k] {
                        out[k] = v;
                        arg[k] = l as u32;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.graph.push(
            Tensor::from_parts(out_shape, out),
            Op::MaxAxis(self.id, axis, arg),
            self.needs_grad(),
        ))
    }

    pub fn min_axis(&self, axis: usize) -> Result<Var> {
        Ok(self.neg().max_axis(axis)?.neg())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax over axis {axis} of {shape:?}")));
        }
        let (outer, len, inner_sz) = split_axis(&shape, axis);
        let value = self.value();
        let d = value.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner_sz {
                let at = |l: usize| (o * len + l) * inner_sz + i;
                let m = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (d[at(l)] - m).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        Ok(self.graph.push(
            Tensor::from_parts(shape, out),
            Op::Softmax(self.id, axis),
            self.needs_grad(),
        ))
    }

    /// Batched matrix product `[b,m,k] × [b,k,n]`.
    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(format!("matmul {sa:?} × {sb:?}")));
        }
        let dims = (sa[0], sa[1], sa[2], sb[2]);
        let out = kernels::batched_matmul(self.value().data(), rhs.value().data(), dims);
        Ok(self.graph.push(
            Tensor::from_parts(vec![sa[0], sa[1], sb[2]], out),
            Op::MatMul(self.id, rhs.id),
            self.needs_grad() || rhs.needs_grad(),
        ))
    }

    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, geo: ConvGeometry) -> Result<Var> {
        let bias_value = bias.map(Var::value);
        let out = kernels::conv2d(&self.value(), &weight.value(), bias_value.as_ref(), geo)?;
        let needs = self.needs_grad() || weight.needs_grad() || bias.is_some_and(Var::needs_grad);
        Ok(self.graph.push(
            out,
            Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), geo },
            needs,
        ))
    }

    pub fn avg_pool(&self, k: usize) -> Result<Var> {
        let out = kernels::avg_pool(&self.value(), k)?;
        Ok(self.graph.push(out, Op::AvgPool(self.id, k), self.needs_grad()))
    }

    pub fn upsample(&self, s: usize) -> Result<Var> {
        let out = kernels::upsample_nearest(&self.value(), s)?;
        Ok(self.graph.push(out, Op::Upsample(self.id, s), self.needs_grad()))
    }

    /// Square minimum filter of the given radius (grey-level erosion);
    /// out-of-frame taps read `pad_value`.
    pub fn min_filter(&self, radius: usize, pad_value: f64) -> Result<Var> {
        let (out, arg) = kernels::min_filter(&self.value(), radius, pad_value)?;
        Ok(self.graph.push(out, Op::MinFilter(self.id, arg), self.needs_grad()))
    }

    /// Bilinear backward warp of `self: [n,c,h,w]` through `grid: [n,ho,wo,2]`.
    pub fn grid_sample(&self, grid: &Var, padding: Padding) -> Result<Var> {
        let out = kernels::grid_sample(&self.value(), &grid.value(), padding)?;
        Ok(self.graph.push(
            out,
            Op::GridSample(self.id, grid.id, padding),
            self.needs_grad() || grid.needs_grad(),
        ))
    }
}


#[cfg(test)]
mod tests {
    use super::gradcheck::max_rel_error;
    use super::*;

    fn sample(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let g = Graph::new();
        let a = g.leaf(Tensor::from_fn(&[2, 1, 3], |i| i as f64));
        let b = g.leaf(Tensor::from_fn(&[4, 1], |i| 10.0 * i as f64));
        let c = a.add(&b).unwrap();
        assert_eq!(c.shape(), vec![2, 4, 3]);
        assert_eq!(c.value().at(&[1, 2, 0]), 3.0 + 20.0);
        let grads = g.backward(&c.sum_all()).unwrap();
        assert_eq!(grads.wrt(&a).unwrap().data(), &[4.0; 6]);
        assert_eq!(grads.wrt(&b).unwrap().data(), &[6.0; 4]);
    }

    #[test]
    fn elementwise_chain_gradients() {
        let x = sample(&[3, 4], 1).map(|v| v + 2.0);
        let err = max_rel_error(&x, 1e-6, |g, v| {
            let w = g.constant(sample(&[3, 4], 2));
            v.mul(&w).unwrap().exp().ln().sqrt().sigmoid().div(&v).unwrap().sum_all()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_and_max_gradients() {
        let x = sample(&[2, 5, 3], 3);
        let err = max_rel_error(&x, 1e-6, |g, v| {
            let w = g.constant(sample(&[2, 5, 3], 4));
            let s = v.softmax(1).unwrap().mul(&w).unwrap();
            s.max_axis(2).unwrap().sum_all().add(&v.min_axis(0).unwrap().sum_all()).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn shape_op_gradients() {
        let x = sample(&[2, 3, 4], 5);
        let err = max_rel_error(&x, 1e-6, |g, v| {
            let w = g.constant(sample(&[4, 3, 2], 6));
            let p = v.permute(&[2, 1, 0]).unwrap().mul(&w).unwrap();
            let n = p.narrow(0, 1, 2).unwrap();
            let c = Var::concat(&[n.clone(), p.narrow(0, 0, 1).unwrap()], 0).unwrap();
            c.mul(&c).unwrap().sum_axis(1).unwrap().reshape(&[6]).unwrap().sum_all()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_gradients() {
        let x = sample(&[2, 3, 4], 7);
        let err = max_rel_error(&x, 1e-6, |g, v| {
            let w = g.constant(sample(&[2, 4, 5], 8));
            let m = v.matmul(&w).unwrap();
            m.mul(&m).unwrap().sum_all()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv_pool_gradients() {
        let x = sample(&[2, 2, 6, 6], 9);
        let w = sample(&[3, 2, 3, 3], 10);
        let geo = ConvGeometry { stride: 1, pad: 1 };
        let err = max_rel_error(&x, 1e-6, |g, v| {
            let wv = g.constant(w.clone());
            let b = g.constant(Tensor::from_fn(&[3], |i| i as f64 * 0.1));
            let y = v.conv2d(&wv, Some(&b), geo).unwrap().avg_pool(2).unwrap().upsample(2).unwrap();
            y.mul(&y).unwrap().sum_all()
        });
        assert!(err < 1e-5, "{err}");
        let err_w = max_rel_error(&w, 1e-6, |g, wv| {
            let xv = g.constant(x.clone());
            let y = xv.conv2d(wv, None, ConvGeometry { stride: 2, pad: 1 }).unwrap();
            y.mul(&y).unwrap().sum_all()
        });
        assert!(err_w < 1e-5, "{err_w}");
    }

    #[test]
    fn min_filter_gradient_routes_to_argmin() {
        let x = sample(&[1, 1, 5, 5], 11);
        let err = max_rel_error(&x, 1e-7, |g, v| {
            let w = g.constant(sample(&[1, 1, 5, 5], 12));
            v.min_filter(1, 0.0).unwrap().mul(&w).unwrap().sum_all()
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn constants_carry_no_gradient() {
        let g = Graph::new();
        let c = g.constant(Tensor::ones(&[2]));
        let y = c.scale(3.0).sum_all();
        assert!(!y.needs_grad());
        let grads = g.backward(&y).unwrap();
        assert!(grads.wrt(&c).is_none());
    }

    #[test]
    fn params_are_deduplicated_by_name() {
        let g = Graph::new();
        let t = Tensor::ones(&[3]);
        let a = g.param("w", &t);
        let b = g.param("w", &t);
        let y = a.add(&b).unwrap().sum_all();
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.param("w").unwrap().data(), &[2.0; 3]);
    }
}
