//! Reverse-mode differentiation over a per-forward-pass graph.
//!
//! A [`Graph`] is built while the forward pass runs and dropped after
//! [`Graph::backward`]. Nodes are appended in topological order, so the
//! backward sweep is a single reverse walk over the node list.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    // Binary ops broadcast the right operand over the leading axes of the left.
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Sqrt(usize),
    Abs(usize),
    Recip(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    GatherRows {
        x: usize,
        index: Rc<[Option<usize>]>,
    },
    ScatterAddRows {
        x: usize,
        index: Rc<[usize]>,
    },
    Reshape(usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter as a leaf. Repeated calls with the same name
    /// return the same node, so multiple uses accumulate into one gradient.
    pub fn param<'g>(&'g self, store: &ParamStore, name: &str) -> Result<Var<'g>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { graph: self, id });
        }
        let value = store.value(name)?.clone();
        let var = self.variable(value);
        self.params.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    /// Names and node ids of all parameters bound into this graph.
    pub(crate) fn bound_params(&self) -> Vec<(String, usize)> {
        self.params
            .borrow()
            .iter()
            .map(|(k, &v)| (k.clone(), v))
            .collect()
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = loss.id + 1;
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::shape("backward", nodes[loss.id].value.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..n).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        // Interior adjoints were consumed above; only leaves remain.
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// Sums a left-operand-shaped gradient down to the broadcast right operand.
fn reduce_broadcast(g: &[f64], rhs_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; rhs_len];
    for chunk in g.chunks_exact(rhs_len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let needs = |id: usize| nodes[id].requires_grad;
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if needs(a) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                accumulate(grads, nodes, a, Tensor::new(av.shape(), da).unwrap());
            }
            if needs(b) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                accumulate(grads, nodes, b, Tensor::new(bv.shape(), db).unwrap());
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs(a) {
                accumulate(grads, nodes, a, g.clone());
            }
            if needs(b) {
                let bv = val(b);
                let mut db = reduce_broadcast(g.data(), bv.len());
                if sign < 0.0 {
                    db.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(grads, nodes, b, Tensor::new(bv.shape(), db).unwrap());
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let bl = bv.len();
            if needs(a) {
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * bv.data()[i % bl])
                    .collect();
                accumulate(grads, nodes, a, Tensor::new(av.shape(), da).unwrap());
            }
            if needs(b) {
                let prod: Vec<f64> = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                let db = reduce_broadcast(&prod, bl);
                accumulate(grads, nodes, b, Tensor::new(bv.shape(), db).unwrap());
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, a, g.map(|v| v * s)),
        Op::Gelu(a) => {
            let x = val(a);
            let d: Vec<f64> = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &gi)| {
                    let u = GELU_C * (x + GELU_K * x * x * x);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    gi * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                })
                .collect();
            accumulate(grads, nodes, a, Tensor::new(x.shape(), d).unwrap());
        }
        Op::Sqrt(a) => {
            let y = &node.value;
            let d: Vec<f64> = y.data().iter().zip(g.data()).map(|(y, gi)| gi / (2.0 * y)).collect();
            accumulate(grads, nodes, a, Tensor::new(y.shape(), d).unwrap());
        }
        Op::Abs(a) => {
            let x = val(a);
            let d: Vec<f64> = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, gi)| if x > 0.0 { *gi } else if x < 0.0 { -gi } else { 0.0 })
                .collect();
            accumulate(grads, nodes, a, Tensor::new(x.shape(), d).unwrap());
        }
        Op::Recip(a) => {
            let y = &node.value;
            let d: Vec<f64> = y.data().iter().zip(g.data()).map(|(y, gi)| -gi * y * y).collect();
            accumulate(grads, nodes, a, Tensor::new(y.shape(), d).unwrap());
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let c = y.cols();
            let mut d = vec![0.0; y.len()];
            for ((yr, gr), dr) in y
                .data()
                .chunks_exact(c)
                .zip(g.data().chunks_exact(c))
                .zip(d.chunks_exact_mut(c))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, nodes, a, Tensor::new(y.shape(), d).unwrap());
        }
        Op::LayerNorm { x, gain, bias } => {
            let xv = val(x);
            let gv = val(gain);
            let c = xv.cols();
            let mut dx = vec![0.0; xv.len()];
            let mut dgain = vec![0.0; c];
            let mut dbias = vec![0.0; c];
            let mut xhat = vec![0.0; c];
            let mut dxhat = vec![0.0; c];
            for ((xr, gr), dr) in xv
                .data()
                .chunks_exact(c)
                .zip(g.data().chunks_exact(c))
                .zip(dx.chunks_exact_mut(c))
            {
                let (mean, inv_std) = row_stats(xr);
                for j in 0..c {
                    xhat[j] = (xr[j] - mean) * inv_std;
                    dxhat[j] = gr[j] * gv.data()[j];
                    dgain[j] += gr[j] * xhat[j];
                    dbias[j] += gr[j];
                }
                let m1 = dxhat.iter().sum::<f64>() / c as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for j in 0..c {
                    dr[j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            accumulate(grads, nodes, x, Tensor::new(xv.shape(), dx).unwrap());
            accumulate(grads, nodes, gain, Tensor::new(gv.shape(), dgain).unwrap());
            accumulate(grads, nodes, bias, Tensor::new(gv.shape(), dbias).unwrap());
        }
        Op::GatherRows { x, ref index } => {
            let xv = val(x);
            let c = xv.cols();
            let mut d = vec![0.0; xv.len()];
            for (out_row, src) in index.iter().enumerate() {
                if let Some(src) = *src {
                    let gr = &g.data()[out_row * c..(out_row + 1) * c];
                    for (dv, gv) in d[src * c..(src + 1) * c].iter_mut().zip(gr) {
                        *dv += gv;
                    }
                }
            }
            accumulate(grads, nodes, x, Tensor::new(xv.shape(), d).unwrap());
        }
        Op::ScatterAddRows { x, ref index } => {
            let xv = val(x);
            let c = xv.cols();
            let mut d = Vec::with_capacity(xv.len());
            for &dst in index.iter() {
                d.extend_from_slice(&g.data()[dst * c..(dst + 1) * c]);
            }
            accumulate(grads, nodes, x, Tensor::new(xv.shape(), d).unwrap());
        }
        Op::Reshape(a) => {
            let d = g.reshape(val(a).shape()).unwrap();
            accumulate(grads, nodes, a, d);
        }
        Op::Transpose(a) => accumulate(grads, nodes, a, g.transpose().unwrap()),
        Op::Sum(a) => accumulate(grads, nodes, a, Tensor::full(val(a).shape(), g.item())),
        Op::Mean(a) => {
            let av = val(a);
            accumulate(grads, nodes, a, Tensor::full(av.shape(), g.item() / av.len() as f64));
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(a), val(b));
            let k = 2.0 * g.item() / av.len() as f64;
            let d: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| k * (x - y)).collect();
            let da = Tensor::new(av.shape(), d).unwrap();
            if needs(b) {
                accumulate(grads, nodes, b, da.map(|v| -v));
            }
            accumulate(grads, nodes, a, da);
        }
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn is_suffix(shape: &[usize], of: &[usize]) -> bool {
    shape.len() <= of.len() && of[of.len() - shape.len()..] == *shape
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Shared handle to this node's value.
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        let nodes: Ref<'_, Vec<Node>> = self.graph.nodes.borrow();
        nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.grad_of(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let out = self.value().matmul(&other.value())?;
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    fn broadcast(
        &self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if !is_suffix(b.shape(), a.shape()) {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let bl = b.len();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % bl]))
            .collect();
        Tensor::new(a.shape(), data)
    }

    /// Elementwise sum; `other` may broadcast over leading axes.
    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        let out = self.broadcast(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        let out = self.broadcast(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, out, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let out = self.broadcast(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        let out = self.value().map(|v| v * s);
        self.unary(out, Op::Scale(self.id, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'g> {
        let out = self
            .value()
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        self.unary(out, Op::Gelu(self.id))
    }

    pub fn sqrt(&self) -> Var<'g> {
        let out = self.value().map(f64::sqrt);
        self.unary(out, Op::Sqrt(self.id))
    }

    pub fn abs(&self) -> Var<'g> {
        let out = self.value().map(f64::abs);
        self.unary(out, Op::Abs(self.id))
    }

    pub fn recip(&self) -> Var<'g> {
        let out = self.value().map(|v| 1.0 / v);
        self.unary(out, Op::Recip(self.id))
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    pub fn softmax_rows(&self) -> Var<'g> {
        let x = self.value();
        let c = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(x.shape(), out).unwrap();
        self.unary(out, Op::SoftmaxRows(self.id))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&self, gain: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let c = x.cols();
        let (gv, bv) = (gain.value(), bias.value());
        if x.rank() == 0 || c < 2 || gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape("layer_norm", x.shape(), gv.shape()));
        }
        let mut out = vec![0.0; x.len()];
        for (xr, orow) in x.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let (mean, inv_std) = row_stats(xr);
            for j in 0..c {
                orow[j] = (xr[j] - mean) * inv_std * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.graph.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
            },
            rg,
        ))
    }

    /// Selects rows of a 2-D tensor. Repeated indices are allowed.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'g>> {
        let padded: Vec<Option<usize>> = index.iter().copied().map(Some).collect();
        self.gather_rows_padded(&padded)
    }

    /// Like [`gather_rows`](Self::gather_rows); `None` yields a zero row.
    pub fn gather_rows_padded(&self, index: &[Option<usize>]) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() != 2 || index.is_empty() {
            return Err(Error::shape("gather_rows", x.shape(), &[index.len()]));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            match i {
                Some(i) if i < r => out.extend_from_slice(x.row(i)),
                Some(i) => return Err(Error::shape("gather_rows", x.shape(), &[i])),
                None => out.extend(std::iter::repeat_n(0.0, c)),
            }
        }
        let out = Tensor::new(&[index.len(), c], out)?;
        Ok(self.unary(
            out,
            Op::GatherRows {
                x: self.id,
                index: index.into(),
            },
        ))
    }

    /// Adds row `i` of `self` into row `index[i]` of a zero `[rows, C]` tensor.
    pub fn scatter_add_rows(&self, index: &[usize], rows: usize) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() != 2 || index.len() != x.shape()[0] || index.iter().any(|&i| i >= rows) {
            return Err(Error::shape("scatter_add_rows", x.shape(), &[index.len(), rows]));
        }
        let c = x.shape()[1];
        let mut out = vec![0.0; rows * c];
        for (src, &dst) in index.iter().enumerate() {
            for (o, v) in out[dst * c..(dst + 1) * c].iter_mut().zip(x.row(src)) {
                *o += v;
            }
        }
        let out = Tensor::new(&[rows, c], out)?;
        Ok(self.unary(
            out,
            Op::ScatterAddRows {
                x: self.id,
                index: index.into(),
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    /// Swaps the two axes of a 2-D tensor.
    pub fn t(&self) -> Result<Var<'g>> {
        let out = self.value().transpose()?;
        Ok(self.unary(out, Op::Transpose(self.id)))
    }

    pub fn sum(&self) -> Var<'g> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let v = self.value();
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.unary(out, Op::Mean(self.id))
    }

    /// Mean squared difference to a same-shaped tensor.
    pub fn mse(&self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("mse", a.shape(), b.shape()));
        }
        let m = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64;
        Ok(self.binary(other, Tensor::scalar(m), Op::Mse(self.id, other.id)))
    }
}
