//! Define-by-run reverse-mode differentiation over dense row-major arrays.
//!
//! A [`Graph`] records every operation as it is evaluated. Node values are
//! held in 64-bit precision so that loss accumulation and finite-difference
//! checks stay meaningful; long-lived parameters live in 32-bit [`Tensor`]s
//! and are lifted into the graph as leaves at the start of each step.
//!
//! Binary elementwise ops require identical shapes. The only broadcasting is
//! explicit: [`Graph::broadcast_rows`] repeats a value along a new leading
//! batch axis and [`Graph::broadcast_cols`] repeats a per-row value along a
//! new trailing feature axis.

use crate::error::{Error, Result};

/// Dense array with 32-bit storage and an optional gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f32]> {
        self.grad.as_deref_mut()
    }

    /// Resets the accumulator to an all-zero buffer of the tensor's shape.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Adds `delta` into the accumulator, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[delta.len()]));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d as f32;
        }
        Ok(())
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which axis a [`Graph::broadcast`] repeats along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// `[..S] -> [n, ..S]`
    LeadingBatch(usize),
    /// `[b] -> [b, d]`
    TrailingFeature(usize),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Clip(Var, f64, f64),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    LogSoftmax(Var),
    Sum(Var),
    SumLast(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Broadcast(Var, Broadcast),
    StopGradient,
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Rebuilt for every training step.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` is not
    /// reachable from the loss (or does not require gradients).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but zero-filled for unreachable nodes.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.sizes[v.0]],
        }
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(Error::shape("leaf", &shape, &[value.len()]));
        }
        Ok(self.push(shape, value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    /// Lifts a [`Tensor`] into the graph, honouring its `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let value = t.data.iter().map(|&x| x as f64).collect();
        self.push(t.shape.clone(), value, Op::Leaf, t.requires_grad)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let node = &self.nodes[a.0];
        let value = node.value.iter().map(|&x| f(x)).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(shape, value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(Error::shape(name, &na.shape, &nb.shape));
        }
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let shape = na.shape.clone();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(shape, value, op, rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Error::shape("matmul", &na.shape, &nb.shape));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = na.value[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &nb.value[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    /// Clamps into `[lo, hi]`. Unit gradient on the closed interval, zero outside.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clip(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let d = last_dim(&node.shape);
        let mut out = node.value.clone();
        for row in out.chunks_mut(d.max(1)) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(shape, out, Op::LogSoftmax(a), rg)
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let s = node.value.iter().sum();
        let rg = node.requires_grad;
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let n = node.value.len().max(1) as f64;
        let s = node.value.iter().sum::<f64>() / n;
        let rg = node.requires_grad;
        self.push(Vec::new(), vec![s], Op::Mean(a), rg)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let node = &self.nodes[a.0];
        if node.shape.is_empty() {
            return Err(Error::shape("sum_last", &node.shape, &[]));
        }
        let d = last_dim(&node.shape);
        let shape = node.shape[..node.shape.len() - 1].to_vec();
        let rows: usize = shape.iter().product();
        let value = if d == 0 {
            vec![0.0; rows]
        } else {
            node.value.chunks(d).map(|r| r.iter().sum()).collect()
        };
        let rg = node.requires_grad;
        Ok(self.push(shape, value, Op::SumLast(a), rg))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", &[], &[]))?;
        let lead = self.nodes[first.0].shape.clone();
        if lead.is_empty() {
            return Err(Error::shape("concat", &lead, &[]));
        }
        let lead = &lead[..lead.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat", &self.nodes[first.0].shape, s));
            }
            widths.push(last_dim(s));
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), rg))
    }

    /// Takes `len` columns of the last axis starting at `start`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let node = &self.nodes[a.0];
        let d = last_dim(&node.shape);
        if node.shape.is_empty() || start + len > d {
            return Err(Error::shape("slice", &node.shape, &[start, start + len]));
        }
        let mut out = Vec::with_capacity(node.value.len() / d.max(1) * len);
        for row in node.value.chunks(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = node.shape.clone();
        *shape.last_mut().unwrap() = len;
        let rg = node.requires_grad;
        Ok(self.push(shape, out, Op::Slice(a, start), rg))
    }

    pub fn broadcast(&mut self, a: Var, how: Broadcast) -> Result<Var> {
        let node = &self.nodes[a.0];
        let (shape, value) = match how {
            Broadcast::LeadingBatch(n) => {
                let mut shape = vec![n];
                shape.extend_from_slice(&node.shape);
                let mut value = Vec::with_capacity(n * node.value.len());
                for _ in 0..n {
                    value.extend_from_slice(&node.value);
                }
                (shape, value)
            }
            Broadcast::TrailingFeature(d) => {
                if node.shape.len() != 1 {
                    return Err(Error::shape("broadcast", &node.shape, &[d]));
                }
                let value = node
                    .value
                    .iter()
                    .flat_map(|&x| std::iter::repeat_n(x, d))
                    .collect();
                (vec![node.shape[0], d], value)
            }
        };
        let rg = node.requires_grad;
        Ok(self.push(shape, value, Op::Broadcast(a, how), rg))
    }

    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        self.broadcast(a, Broadcast::LeadingBatch(n))
    }

    pub fn broadcast_cols(&mut self, a: Var, d: usize) -> Result<Var> {
        self.broadcast(a, Broadcast::TrailingFeature(d))
    }

    /// Identity on values; blocks every gradient path through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.push(shape, value, Op::StopGradient, false)
    }

    /// `x W + b` with `b` repeated over the leading batch axis.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let rows = self.shape(xw)[0];
        let bb = self.broadcast_rows(b, rows)?;
        self.add(xw, bb)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads, sizes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
                if na.requires_grad {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &nb.value[p * n..(p + 1) * n];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(grads, *a, &da);
                }
                if nb.requires_grad {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = na.value[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * gv;
                            }
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.pass(grads, *a, || g.to_vec());
                self.pass(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.pass(grads, *a, || g.to_vec());
                self.pass(grads, *b, || g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.pass(grads, *a, || g.iter().zip(vb).map(|(g, y)| g * y).collect());
                self.pass(grads, *b, || g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => self.pass(grads, *a, || g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) => self.pass(grads, *a, || g.to_vec()),
            Op::Tanh(a) => {
                self.pass(grads, *a, || g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect())
            }
            Op::Sigmoid(a) => {
                self.pass(grads, *a, || g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())
            }
            Op::LeakyRelu(a, slope) => {
                let x = &self.nodes[a.0].value;
                self.pass(grads, *a, || {
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                        .collect()
                })
            }
            Op::Clip(a, lo, hi) => {
                let x = &self.nodes[a.0].value;
                self.pass(grads, *a, || {
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                        .collect()
                })
            }
            Op::Exp(a) => self.pass(grads, *a, || g.iter().zip(y).map(|(g, y)| g * y).collect()),
            Op::Log(a) => {
                let x = &self.nodes[a.0].value;
                self.pass(grads, *a, || g.iter().zip(x).map(|(g, x)| g / x).collect())
            }
            Op::Softplus(a) => {
                let x = &self.nodes[a.0].value;
                self.pass(grads, *a, || g.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect())
            }
            Op::LogSoftmax(a) => {
                let d = last_dim(&node.shape).max(1);
                self.pass(grads, *a, || {
                    let mut out = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks(d).zip(y.chunks(d)) {
                        let total: f64 = grow.iter().sum();
                        out.extend(grow.iter().zip(yrow).map(|(g, y)| g - y.exp() * total));
                    }
                    out
                })
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                self.pass(grads, *a, || vec![g[0]; n])
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                self.pass(grads, *a, || vec![g[0] / n.max(1) as f64; n])
            }
            Op::SumLast(a) => {
                let d = last_dim(&self.nodes[a.0].shape);
                self.pass(grads, *a, || {
                    g.iter().flat_map(|&x| std::iter::repeat_n(x, d)).collect()
                })
            }
            Op::Concat(parts) => {
                let total = last_dim(&node.shape);
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for p in parts {
                    let w = last_dim(&self.nodes[p.0].shape);
                    self.pass(grads, *p, || {
                        let mut out = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            out.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        out
                    });
                    offset += w;
                }
            }
            Op::Slice(a, start) => {
                let d = last_dim(&self.nodes[a.0].shape);
                let len = last_dim(&node.shape);
                let n = self.nodes[a.0].value.len();
                self.pass(grads, *a, || {
                    let mut out = vec![0.0; n];
                    if len > 0 {
                        for (r, grow) in g.chunks(len).enumerate() {
                            out[r * d + start..r * d + start + len].copy_from_slice(grow);
                        }
                    }
                    out
                })
            }
            Op::Broadcast(a, how) => {
                let n = self.nodes[a.0].value.len();
                self.pass(grads, *a, || match how {
                    Broadcast::LeadingBatch(_) => {
                        let mut out = vec![0.0; n];
                        if n > 0 {
                            for chunk in g.chunks(n) {
                                out.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                            }
                        }
                        out
                    }
                    Broadcast::TrailingFeature(d) => {
                        if *d == 0 {
                            vec![0.0; n]
                        } else {
                            g.chunks(*d).map(|r| r.iter().sum()).collect()
                        }
                    }
                })
            }
        }
    }

    fn pass(&self, grads: &mut [Option<Vec<f64>>], to: Var, delta: impl FnOnce() -> Vec<f64>) {
        if self.nodes[to.0].requires_grad {
            accumulate(grads, to, &delta());
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], to: Var, delta: &[f64]) {
    match &mut grads[to.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Max-shifted `ln Σ exp(x_i)`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
