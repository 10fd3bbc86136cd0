//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and the ids of
//! its inputs, so node order is a topological order. [`Tape::backward`] walks
//! the nodes once in reverse, accumulating adjoints into inputs that require
//! gradients. Nodes that do not depend on any gradient-requiring leaf are
//! never visited.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};
use crate::error::{contract_err, dim_err, Error, Result};

/// Pointwise nonlinearities (plus `Softmax`, which acts on the last axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Swish,
    Relu,
    Gelu,
    Sigmoid,
    Softmax,
}

/// Which statistics batch normalization uses.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    /// Normalize with the current batch's statistics.
    Batch,
    /// Normalize with externally tracked running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one batch-normalized batch (biased variance).
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
        batch: usize,
        out_ch: usize,
    },
    AvgPool {
        x: usize,
        geom: ConvGeom,
        planes: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Rc<Vec<T>>,
        invstd: Vec<T>,
        batch_stats: bool,
        outer: usize,
        channels: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Rc<Vec<T>>,
        invstd: Vec<T>,
        d: usize,
    },
    Act {
        x: usize,
        kind: Activation,
    },
    Softmax {
        x: usize,
        d: usize,
    },
    Reduce {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
        scale: T,
    },
    CrossEntropy {
        logits: usize,
        probs: Rc<Vec<T>>,
        labels: Vec<Option<usize>>,
        count: usize,
        classes: usize,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
        d: usize,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    PrependToken {
        x: usize,
        token: usize,
    },
    TakeToken {
        x: usize,
        index: usize,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// The operation record for one forward pass.
///
/// A tape is single-threaded; build one per forward/backward pass.
pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients of a scalar with respect to every gradient-requiring leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Each recorded operation between the leaves and `loss` is visited
    /// exactly once, in reverse order. Intermediate adjoints are dropped as
    /// soon as they have been propagated.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(contract_err!("loss belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", root.value.shape()));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads: out });
        }
        adj[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                out[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            backprop_node(&nodes, node, g, &mut adj);
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate<T: Element>(adj: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    match &mut adj[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot => *slot = Some(g),
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gelu_parts<T: Element>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let half = T::of(0.5);
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}

fn act_forward<T: Element>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Swish => x * sigmoid(x),
        Activation::Relu => x.max(T::zero()),
        Activation::Gelu => gelu_parts(x).0,
        Activation::Sigmoid => sigmoid(x),
        Activation::Softmax => unreachable!("softmax is not pointwise"),
    }
}

fn act_derivative<T: Element>(kind: Activation, x: T, y: T) -> T {
    match kind {
        Activation::Swish => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Gelu => gelu_parts(x).1,
        Activation::Sigmoid => y * (T::one() - y),
        Activation::Softmax => unreachable!("softmax is not pointwise"),
    }
}

fn backprop_node<T: Element>(nodes: &[Node<T>], node: &Node<T>, g: Vec<T>, adj: &mut [Option<Vec<T>>]) {
    let req = |id: usize| nodes[id].requires_grad;
    let val = |id: usize| &*nodes[id].value;
    match &node.op {
        Op::Leaf => unreachable!(),
        Op::Add(a, b) => {
            if req(*b) {
                accumulate(adj, *b, g.clone());
            }
            if req(*a) {
                accumulate(adj, *a, g);
            }
        }
        Op::Sub(a, b) => {
            if req(*b) {
                accumulate(adj, *b, g.iter().map(|&v| -v).collect());
            }
            if req(*a) {
                accumulate(adj, *a, g);
            }
        }
        Op::Mul(a, b) => {
            if req(*a) {
                let bv = val(*b).data();
                accumulate(adj, *a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect());
            }
            if req(*b) {
                let av = val(*a).data();
                accumulate(adj, *b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect());
            }
        }
        Op::Scale(x, c) => {
            if req(*x) {
                accumulate(adj, *x, g.iter().map(|&v| v * *c).collect());
            }
        }
        Op::AddScalar(x) => {
            if req(*x) {
                accumulate(adj, *x, g);
            }
        }
        Op::AddBias { x, bias } => {
            if req(*bias) {
                let n = val(*bias).len();
                let mut gb = vec![T::zero(); n];
                for chunk in g.chunks_exact(n) {
                    for (a, &v) in gb.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                accumulate(adj, *bias, gb);
            }
            if req(*x) {
                accumulate(adj, *x, g);
            }
        }
        Op::Bmm { a, b, trans_b, batch, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if req(*a) {
                let bv = val(*b).data();
                let mut ga = vec![T::zero(); batch * m * k];
                for i in 0..*batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    let dst = &mut ga[i * m * k..(i + 1) * m * k];
                    // ga = g · bᵀ   (b is k×n, or n×k when trans_b)
                    kernels::gemm(false, !*trans_b, m, n, k, gi, bi, T::zero(), dst);
                }
                accumulate(adj, *a, ga);
            }
            if req(*b) {
                let av = val(*a).data();
                let mut gb = vec![T::zero(); batch * k * n];
                for i in 0..*batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // gb (n×k) = gᵀ · a
                        kernels::gemm(true, false, n, m, k, gi, ai, T::zero(), dst);
                    } else {
                        // gb (k×n) = aᵀ · g
                        kernels::gemm(true, false, k, m, n, ai, gi, T::zero(), dst);
                    }
                }
                accumulate(adj, *b, gb);
            }
        }
        Op::Reshape(x) => {
            if req(*x) {
                accumulate(adj, *x, g);
            }
        }
        Op::Permute { x, perm } => {
            if req(*x) {
                let (d, _) = kernels::permute(&g, node.value.shape(), &kernels::inverse_perm(perm));
                accumulate(adj, *x, d);
            }
        }
        Op::Conv2d { x, w, geom, batch, out_ch } => {
            let plane = geom.oh * geom.ow;
            let rows = geom.cols_rows();
            let in_len = geom.c * geom.h * geom.w;
            let xv = val(*x).data();
            let wv = val(*w).data();
            let need_x = req(*x);
            let need_w = req(*w);
            let mut gw = if need_w { vec![T::zero(); out_ch * rows] } else { Vec::new() };
            let mut gx = if need_x { vec![T::zero(); batch * in_len] } else { Vec::new() };
            let mut cols = vec![T::zero(); geom.cols_len()];
            for bi in 0..*batch {
                let gb = &g[bi * out_ch * plane..(bi + 1) * out_ch * plane];
                if need_w {
                    kernels::im2col(&xv[bi * in_len..(bi + 1) * in_len], geom, &mut cols);
                    kernels::gemm(false, true, *out_ch, plane, rows, gb, &cols, T::one(), &mut gw);
                }
                if need_x {
                    kernels::gemm(true, false, rows, *out_ch, plane, wv, gb, T::zero(), &mut cols);
                    kernels::col2im(&cols, geom, &mut gx[bi * in_len..(bi + 1) * in_len]);
                }
            }
            if need_w {
                accumulate(adj, *w, gw);
            }
            if need_x {
                accumulate(adj, *x, gx);
            }
        }
        Op::AvgPool { x, geom, planes } => {
            if req(*x) {
                let mut gx = vec![T::zero(); planes * geom.h * geom.w];
                kernels::avg_pool_backward(&g, *planes, geom, &mut gx);
                accumulate(adj, *x, gx);
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, invstd, batch_stats, outer, channels, inner } => {
            let (outer, channels, inner) = (*outer, *channels, *inner);
            let gam = val(*gamma).data();
            let mut sum_g = vec![T::zero(); channels];
            let mut sum_gx = vec![T::zero(); channels];
            for o in 0..outer {
                for c in 0..channels {
                    let base = (o * channels + c) * inner;
                    for i in base..base + inner {
                        sum_g[c] += g[i];
                        sum_gx[c] += g[i] * xhat[i];
                    }
                }
            }
            if req(*x) {
                let count = T::of((outer * inner) as f64);
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        let k = gam[c] * invstd[c];
                        for i in base..base + inner {
                            gx[i] = if *batch_stats {
                                k * (g[i] - sum_g[c] / count - xhat[i] * sum_gx[c] / count)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                accumulate(adj, *x, gx);
            }
            if req(*gamma) {
                accumulate(adj, *gamma, sum_gx);
            }
            if req(*beta) {
                accumulate(adj, *beta, sum_g);
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, invstd, d } => {
            let d = *d;
            let gam = val(*gamma).data();
            if req(*x) {
                let df = T::of(d as f64);
                let mut gx = vec![T::zero(); g.len()];
                for (r, inv) in invstd.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for (j, i) in row.clone().enumerate() {
                        let gh = g[i] * gam[j];
                        s1 += gh;
                        s2 += gh * xhat[i];
                    }
                    for (j, i) in row.enumerate() {
                        let gh = g[i] * gam[j];
                        gx[i] = *inv * (gh - s1 / df - xhat[i] * s2 / df);
                    }
                }
                accumulate(adj, *x, gx);
            }
            if req(*gamma) || req(*beta) {
                let mut gg = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for (i, &gi) in g.iter().enumerate() {
                    gg[i % d] += gi * xhat[i];
                    gbeta[i % d] += gi;
                }
                if req(*gamma) {
                    accumulate(adj, *gamma, gg);
                }
                if req(*beta) {
                    accumulate(adj, *beta, gbeta);
                }
            }
        }
        Op::Act { x, kind } => {
            if req(*x) {
                let xv = val(*x).data();
                let yv = node.value.data();
                let gx = g
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&gi, (&xi, &yi))| gi * act_derivative(*kind, xi, yi))
                    .collect();
                accumulate(adj, *x, gx);
            }
        }
        Op::Softmax { x, d } => {
            if req(*x) {
                let y = node.value.data();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), out) in g.chunks_exact(*d).zip(y.chunks_exact(*d)).zip(gx.chunks_exact_mut(*d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(adj, *x, gx);
            }
        }
        Op::Reduce { x, outer, len, inner, scale } => {
            if req(*x) {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..*outer {
                    for l in 0..*len {
                        for i in 0..*inner {
                            gx[(o * len + l) * inner + i] = g[o * inner + i] * *scale;
                        }
                    }
                }
                accumulate(adj, *x, gx);
            }
        }
        Op::CrossEntropy { logits, probs, labels, count, classes } => {
            if req(*logits) {
                let mut gx = vec![T::zero(); labels.len() * classes];
                if *count > 0 {
                    let k = g[0] / T::of(*count as f64);
                    for (r, label) in labels.iter().enumerate() {
                        if let Some(l) = label {
                            for c in 0..*classes {
                                let i = r * classes + c;
                                let onehot = if c == *l { T::one() } else { T::zero() };
                                gx[i] = k * (probs[i] - onehot);
                            }
                        }
                    }
                }
                accumulate(adj, *logits, gx);
            }
        }
        Op::L2Normalize { x, norms, d } => {
            if req(*x) {
                let y = node.value.data();
                let mut gx = vec![T::zero(); g.len()];
                for (r, n) in norms.iter().enumerate() {
                    let sl = r * d..(r + 1) * d;
                    let dot: T = g[sl.clone()].iter().zip(&y[sl.clone()]).map(|(&a, &b)| a * b).sum();
                    for i in sl {
                        gx[i] = (g[i] - y[i] * dot) / *n;
                    }
                }
                accumulate(adj, *x, gx);
            }
        }
        Op::GatherRows { x, idx } => {
            if req(*x) {
                let xv = val(*x);
                let stride = xv.len() / xv.shape()[0];
                let mut gx = vec![T::zero(); xv.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..stride {
                        gx[src * stride + j] += g[r * stride + j];
                    }
                }
                accumulate(adj, *x, gx);
            }
        }
        Op::PrependToken { x, token } => {
            let s = val(*x).shape();
            let (b, t, d) = (s[0], s[1], s[2]);
            if req(*token) {
                let mut gt = vec![T::zero(); d];
                for bi in 0..b {
                    for j in 0..d {
                        gt[j] += g[bi * (t + 1) * d + j];
                    }
                }
                accumulate(adj, *token, gt);
            }
            if req(*x) {
                let mut gx = Vec::with_capacity(b * t * d);
                for bi in 0..b {
                    let start = bi * (t + 1) * d + d;
                    gx.extend_from_slice(&g[start..start + t * d]);
                }
                accumulate(adj, *x, gx);
            }
        }
        Op::TakeToken { x, index } => {
            if req(*x) {
                let s = val(*x).shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let mut gx = vec![T::zero(); b * t * d];
                for bi in 0..b {
                    let dst = (bi * t + index) * d;
                    gx[dst..dst + d].copy_from_slice(&g[bi * d..(bi + 1) * d]);
                }
                accumulate(adj, *x, gx);
            }
        }
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(contract_err!("operands recorded on different tapes"))
        }
    }

    fn emit(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'t, T> {
        let requires = inputs.iter().any(|&i| self.tape.requires(i));
        self.tape.push(value, op, requires)
    }

    fn zip_same(&self, other: &Var<'t, T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(dim_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.emit(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.emit(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.emit(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * c);
        self.emit(v, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x + c);
        self.emit(v, Op::AddScalar(self.id), &[self.id])
    }

    /// Adds `bias`, whose shape must equal a trailing suffix of `self`'s shape.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(bias)?;
        let (x, b) = (self.value(), bias.value());
        let xs = x.shape();
        let bs = b.shape();
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(dim_err!("add_bias: bias {:?} does not trail {:?}", bs, xs));
        }
        let n = b.len();
        let mut data = x.data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (d, &v) in chunk.iter_mut().zip(b.data()) {
                *d += v;
            }
        }
        let out = Tensor::new(xs.to_vec(), data)?;
        Ok(self.emit(out, Op::AddBias { x: self.id, bias: bias.id }, &[self.id, bias.id]))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(dim_err!("matmul: cannot multiply {:?} by {:?}", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(false, false, m, k, n, a.data(), b.data(), T::zero(), &mut out);
        let op = Op::Bmm { a: self.id, b: other.id, trans_b: false, batch: 1, m, k, n };
        Ok(self.emit(Tensor::new(vec![m, n], out)?, op, &[self.id, other.id]))
    }

    /// Batched product over matching leading axes: `[..., m, k] × [..., k, n]`,
    /// or `[..., m, k] × [..., n, k]ᵀ` when `trans_b`.
    pub fn bmm(&self, other: &Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let bad = || dim_err!("bmm: cannot multiply {:?} by {:?} (trans_b={trans_b})", sa, sb);
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(bad());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(bad());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                false,
                trans_b,
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let op = Op::Bmm { a: self.id, b: other.id, trans_b, batch, m, k, n };
        Ok(self.emit(Tensor::new(shape, out)?, op, &[self.id, other.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.to_tensor().reshape(shape.to_vec())?;
        Ok(self.emit(v, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..x.rank()).collect::<Vec<_>>() {
            return Err(dim_err!("permute: {:?} is not a permutation of rank {}", perm, x.rank()));
        }
        let (data, shape) = kernels::permute(x.data(), x.shape(), perm);
        let op = Op::Permute { x: self.id, perm: perm.to_vec() };
        Ok(self.emit(Tensor::new(shape, data)?, op, &[self.id]))
    }

    /// 2-D convolution (cross-correlation) with zero padding and no bias.
    /// `self` is `[B, C, H, W]`, `kernel` is `[O, C, kh, kw]`.
    pub fn conv2d(&self, kernel: &Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        self.same_tape(kernel)?;
        let (x, w) = (self.value(), kernel.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(dim_err!("conv2d: input {:?} incompatible with kernel {:?}", xs, ws));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d: stride must be at least 1"));
        }
        let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(dim_err!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                wd + 2 * padding
            ));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (wd + 2 * padding - kw) / stride + 1,
        };
        let plane = geom.oh * geom.ow;
        let in_len = c * h * wd;
        let mut out = vec![T::zero(); b * o * plane];
        let mut cols = vec![T::zero(); geom.cols_len()];
        for bi in 0..b {
            kernels::im2col(&x.data()[bi * in_len..(bi + 1) * in_len], &geom, &mut cols);
            kernels::gemm(
                false,
                false,
                o,
                geom.cols_rows(),
                plane,
                w.data(),
                &cols,
                T::zero(),
                &mut out[bi * o * plane..(bi + 1) * o * plane],
            );
        }
        let op = Op::Conv2d { x: self.id, w: kernel.id, geom, batch: b, out_ch: o };
        let t = Tensor::new(vec![b, o, geom.oh, geom.ow], out)?;
        Ok(self.emit(t, op, &[self.id, kernel.id]))
    }

    /// Average pooling over `[B, C, H, W]` with zero padding; padded cells count toward the mean.
    pub fn avg_pool2d(&self, k: usize, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let xs = x.shape();
        if xs.len() != 4 || stride == 0 || k > xs[2] + 2 * padding || k > xs[3] + 2 * padding {
            return Err(dim_err!("avg_pool2d: window {k} stride {stride} invalid for {:?}", xs));
        }
        let geom = ConvGeom {
            c: 1,
            h: xs[2],
            w: xs[3],
            kh: k,
            kw: k,
            stride,
            pad: padding,
            oh: (xs[2] + 2 * padding - k) / stride + 1,
            ow: (xs[3] + 2 * padding - k) / stride + 1,
        };
        let planes = xs[0] * xs[1];
        let mut out = vec![T::zero(); planes * geom.oh * geom.ow];
        kernels::avg_pool_forward(x.data(), planes, &geom, &mut out);
        let t = Tensor::new(vec![xs[0], xs[1], geom.oh, geom.ow], out)?;
        Ok(self.emit(t, Op::AvgPool { x: self.id, geom, planes }, &[self.id]))
    }

    /// Batch normalization over axis 1 of `[B, C, ...]`.
    ///
    /// In [`NormMode::Batch`] the returned statistics are the batch mean and
    /// biased variance per channel, for the caller's running averages.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        eps: T,
        mode: NormMode<'_, T>,
    ) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let x = self.value();
        let xs = x.shape();
        if xs.len() < 2 {
            return Err(dim_err!("batch_norm needs [B, C, ...], got {:?}", xs));
        }
        let (outer, channels) = (xs[0], xs[1]);
        if outer == 0 {
            return Err(Error::EmptyBatch);
        }
        let inner: usize = xs[2..].iter().product();
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [channels] || bv.shape() != [channels] {
            return Err(dim_err!("batch_norm: gamma {:?} / beta {:?} must be [{channels}]", gv.shape(), bv.shape()));
        }
        let data = x.data();
        let (mean, var, stats) = match mode {
            NormMode::Batch => {
                let count = T::of((outer * inner) as f64);
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for o in 0..outer {
                    for (c, m) in mean.iter_mut().enumerate() {
                        let base = (o * channels + c) * inner;
                        *m += data[base..base + inner].iter().copied().sum::<T>();
                    }
                }
                for m in &mut mean {
                    *m = *m / count;
                }
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        for &v in &data[base..base + inner] {
                            var[c] += (v - mean[c]) * (v - mean[c]);
                        }
                    }
                }
                for v in &mut var {
                    *v = *v / count;
                }
                let stats = BatchStats { mean: mean.clone(), var: var.clone() };
                (mean, var, Some(stats))
            }
            NormMode::Running { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(dim_err!("batch_norm: running stats must have {channels} channels"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (data[i] - mean[c]) * invstd[c];
                    out[i] = gv.data()[c] * xhat[i] + bv.data()[c];
                }
            }
        }
        let op = Op::BatchNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat: Rc::new(xhat),
            invstd,
            batch_stats: stats.is_some(),
            outer,
            channels,
            inner,
        };
        let t = Tensor::new(xs.to_vec(), out)?;
        Ok((self.emit(t, op, &[self.id, gamma.id, beta.id]), stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(dim_err!("layer_norm: gamma/beta must be [{d}]"));
        }
        let df = T::of(d as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut invstd = Vec::with_capacity(x.len() / d.max(1));
        for (r, row) in x.data().chunks_exact(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let inv = T::one() / (var + eps).sqrt();
            invstd.push(inv);
            for j in 0..d {
                let i = r * d + j;
                xhat[i] = (row[j] - mean) * inv;
                out[i] = gv.data()[j] * xhat[i] + bv.data()[j];
            }
        }
        let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat: Rc::new(xhat), invstd, d };
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.emit(t, op, &[self.id, gamma.id, beta.id]))
    }

    pub fn activation(&self, kind: Activation) -> Result<Var<'t, T>> {
        if kind == Activation::Softmax {
            return self.softmax();
        }
        let v = self.value().map(|x| act_forward(kind, x));
        Ok(self.emit(v, Op::Act { x: self.id, kind }, &[self.id]))
    }

    pub fn swish(&self) -> Var<'t, T> {
        self.activation(Activation::Swish).expect("pointwise")
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.activation(Activation::Relu).expect("pointwise")
    }

    pub fn gelu(&self) -> Var<'t, T> {
        self.activation(Activation::Gelu).expect("pointwise")
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.activation(Activation::Sigmoid).expect("pointwise")
    }

    /// Softmax over the last axis, stabilized by subtracting each row's max.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| dim_err!("softmax on a scalar"))?;
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.emit(t, Op::Softmax { x: self.id, d }, &[self.id]))
    }

    fn reduce(&self, axis: usize, mean: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(dim_err!("cannot reduce axis {axis} of {:?}", s));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let scale = if mean { T::one() / T::of(len as f64) } else { T::one() };
        if mean {
            for v in &mut out {
                *v = *v * scale;
            }
        }
        let mut shape = s[..axis].to_vec();
        shape.extend_from_slice(&s[axis + 1..]);
        let op = Op::Reduce { x: self.id, outer, len, inner, scale };
        Ok(self.emit(Tensor::new(shape, out)?, op, &[self.id]))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce(axis, true)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.reshape(&[n]).and_then(|v| v.sum_axis(0)).expect("flat reduce")
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.reshape(&[n]).and_then(|v| v.mean_axis(0)).expect("flat reduce")
    }

    /// Arithmetic mean over spatial axes of `[B, C, H, W]` or the token axis of `[B, T, D]`.
    pub fn global_avg_pool(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        match s.len() {
            4 => self.reshape(&[s[0], s[1], s[2] * s[3]])?.mean_axis(2),
            3 => self.mean_axis(1),
            _ => Err(dim_err!("global_avg_pool expects rank 3 or 4, got {:?}", s)),
        }
    }

    /// Mean cross-entropy of `[B, C]` logits over rows whose label is `Some`.
    ///
    /// With no labelled rows the loss is exactly zero and so is its gradient.
    pub fn cross_entropy_masked(&self, labels: &[Option<usize>]) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err!("cross_entropy: logits {:?} vs {} labels", s, labels.len()));
        }
        let classes = s[1];
        for (row, l) in labels.iter().enumerate() {
            if let Some(l) = *l {
                if l >= classes {
                    return Err(Error::Label { row, label: l as i64, num_classes: classes });
                }
            }
        }
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, label) in labels.iter().enumerate() {
            let Some(l) = label else { continue };
            let row = &x.data()[r * classes..(r + 1) * classes];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[*l];
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - m).exp() / z;
            }
            count += 1;
        }
        let value = if count > 0 { total / T::of(count as f64) } else { T::zero() };
        let op = Op::CrossEntropy { logits: self.id, probs: Rc::new(probs), labels: labels.to_vec(), count, classes };
        Ok(self.emit(Tensor::scalar(value), op, &[self.id]))
    }

    /// Mean cross-entropy with every row labelled.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let labels: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        self.cross_entropy_masked(&labels)
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| dim_err!("l2_normalize on a scalar"))?;
        let floor = T::of(1e-12);
        let mut out = x.data().to_vec();
        let mut norms = Vec::with_capacity(x.len() / d.max(1));
        for row in out.chunks_exact_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            for v in row.iter_mut() {
                *v = *v / n;
            }
            norms.push(n);
        }
        let op = Op::L2Normalize { x: self.id, norms, d };
        Ok(self.emit(Tensor::new(x.shape().to_vec(), out)?, op, &[self.id]))
    }

    /// Selects rows of the leading axis (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = *x.shape().first().ok_or_else(|| dim_err!("gather_rows on a scalar"))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(dim_err!("gather_rows: index {bad} out of {n} rows"));
        }
        let mut data = Vec::with_capacity(idx.len() * x.len() / n.max(1));
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        let op = Op::GatherRows { x: self.id, idx: idx.to_vec() };
        Ok(self.emit(Tensor::new(shape, data)?, op, &[self.id]))
    }

    /// Prepends a shared `[D]` token to every sequence of `[B, T, D]`.
    pub fn prepend_token(&self, token: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(token)?;
        let (x, tok) = (self.value(), token.value());
        let s = x.shape();
        if s.len() != 3 || tok.shape() != [s[2]] {
            return Err(dim_err!("prepend_token: token {:?} vs sequence {:?}", tok.shape(), s));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(b * (t + 1) * d);
        for bi in 0..b {
            data.extend_from_slice(tok.data());
            data.extend_from_slice(&x.data()[bi * t * d..(bi + 1) * t * d]);
        }
        let op = Op::PrependToken { x: self.id, token: token.id };
        Ok(self.emit(Tensor::new(vec![b, t + 1, d], data)?, op, &[self.id, token.id]))
    }

    /// Token `index` of every sequence of `[B, T, D]`, as `[B, D]`.
    pub fn take_token(&self, index: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 || index >= s[1] {
            return Err(dim_err!("take_token: index {index} invalid for {:?}", s));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(b * d);
        for bi in 0..b {
            let start = (bi * t + index) * d;
            data.extend_from_slice(&x.data()[start..start + d]);
        }
        let op = Op::TakeToken { x: self.id, index };
        Ok(self.emit(Tensor::new(vec![b, d], data)?, op, &[self.id]))
    }
}
