use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::kernels;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the second operand of an elementwise binary op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// Single element applied everywhere.
    Scalar,
    /// 1-D vector matching the last axis.
    Row,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, T),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Softmax { x: Var, axis: usize },
    Log(Var),
    Exp(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    Cosine { a: Var, b: Var, na: Vec<T>, nb: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Selector for [`Graph::forward_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Mean,
    LayerNorm { eps: f64 },
    Gelu,
    Relu,
    Softmax { axis: usize },
    Log,
    Exp,
    L2Normalize,
    CosineSimilarity,
    CrossEntropyFromLogits { labels: Vec<usize> },
}

/// Epsilon floor of every vector norm used as a divisor.
pub const NORM_EPS: f64 = 1e-12;

/// Arena of values plus the operations that produced them.
///
/// A graph built with [`Graph::new`] records backward information for every
/// op that has an input requiring gradient. A graph built with
/// [`Graph::eval`] treats parameters as constants, so it never records.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    train: bool,
    last_visits: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            train: true,
            last_visits: 0,
        }
    }

    pub fn eval() -> Self {
        Graph {
            train: false,
            ..Self::new()
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes holding backward information.
    pub fn recorded_nodes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Nodes visited by the most recent [`Graph::backward`] call.
    pub fn last_backward_visits(&self) -> usize {
        self.last_visits
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if rg {
            self.push_node(value, op, true)
        } else {
            self.push_node(value, Op::Leaf, false)
        }
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    /// Leaf that requires gradient in train mode and is a constant in eval mode.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let rg = self.train;
        self.push_node(t, Op::Leaf, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf that requires grad.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Generic entry point: dispatches on `kind`.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let name = format!("{kind:?}");
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Concat { axis } => self.concat(inputs, axis),
            OpKind::Slice { axis, start, len } => {
                arity(1).and_then(|_| self.slice(inputs[0], axis, start, len))
            }
            OpKind::Mean => arity(1).and_then(|_| self.mean(inputs[0])),
            OpKind::LayerNorm { eps } => {
                arity(3).and_then(|_| self.layer_norm(inputs[0], inputs[1], inputs[2], eps))
            }
            OpKind::Gelu => arity(1).and_then(|_| self.gelu(inputs[0])),
            OpKind::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            OpKind::Softmax { axis } => arity(1).and_then(|_| self.softmax(inputs[0], axis)),
            OpKind::Log => arity(1).and_then(|_| self.log(inputs[0])),
            OpKind::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            OpKind::L2Normalize => arity(1).and_then(|_| self.l2_normalize(inputs[0])),
            OpKind::CosineSimilarity => {
                arity(2).and_then(|_| self.cosine_similarity(inputs[0], inputs[1]))
            }
            OpKind::CrossEntropyFromLogits { labels } => {
                arity(1).and_then(|_| self.cross_entropy(inputs[0], &labels))
            }
        }
    }

    // ---- ops ------------------------------------------------------------

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", &[ta.shape(), tb.shape()]));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); n * m];
        kernels::matmul(ta.data(), tb.data(), n, k, m, &mut out);
        let t = Tensor::from_parts(vec![n, m], out);
        Ok(self.push(t, &[a, b], Op::MatMul(a, b)))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if tb.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if tb.ndim() == 1 && tb.len() == ta.last_dim() {
            Ok(Broadcast::Row)
        } else {
            Err(Error::shape(op, &[ta.shape(), tb.shape()]))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(Var, Var, Broadcast) -> Op<T>,
    ) -> Result<Var> {
        let bc = self.broadcast_kind(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (ta.data(), tb.data());
        let w = tb.len();
        let out: Vec<T> = match bc {
            Broadcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Broadcast::Row => da
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, db[i % w]))
                .collect(),
        };
        let t = Tensor::from_parts(ta.shape().to_vec(), out);
        Ok(self.push(t, &[a, b], op(a, b, bc)))
    }

    /// Elementwise sum; `b` may be a scalar or a vector over the last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, &[a], Op::Scale(a, s))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Empty("concat input list".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &[&base]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.value(*v).shape()).collect();
                return Err(Error::shape("concat", &shapes));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(
            t,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                shapes: vec![shape.to_vec(), vec![axis, start, len]],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&tx.data()[from..from + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let t = Tensor::from_parts(new_shape, out);
        Ok(self.push(t, &[x], Op::Slice { input: x, axis, start }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 {
            return Err(Error::shape("transpose", &[tx.shape()]));
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let d = tx.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let t = Tensor::from_parts(vec![c, r], out);
        Ok(self.push(t, &[x], Op::Transpose(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// Mean over all elements.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::of_usize(t.len());
        Ok(self.push(Tensor::scalar(m), &[x], Op::Mean(x)))
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let w = tx.last_dim();
        if tg.shape() != [w] || tb.shape() != [w] {
            return Err(Error::shape("layernorm", &[tx.shape(), tg.shape(), tb.shape()]));
        }
        let rows = tx.rows();
        let wt = T::of_usize(w);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); tx.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mu = row.iter().copied().sum::<T>() / wt;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / wt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..w {
                let h = (row[j] - mu) * is;
                xhat[r * w + j] = h;
                out[r * w + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = [x, gamma, beta].iter().any(|v| self.requires_grad(*v));
        let op = if rg {
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(t, &[x, gamma, beta], op))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(kernels::gelu);
        Ok(self.push(t, &[x], Op::Gelu(x)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(t, &[x], Op::Relu(x)))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.abs());
        self.push(t, &[x], Op::Abs(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &[shape]));
        }
        let (outer, n, inner) = split_axis(shape, axis);
        let mut out = tx.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| out[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for k in 0..n {
                    let e = (out[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    out[idx(k)] /= s;
                }
            }
        }
        let t = Tensor::from_parts(shape.to_vec(), out);
        Ok(self.push(t, &[x], Op::Softmax { x, axis }))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if let Some(bad) = tx.data().iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        let t = tx.map(|v| v.ln());
        Ok(self.push(t, &[x], Op::Log(x)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.exp());
        Ok(self.push(t, &[x], Op::Exp(x)))
    }

    /// Divides each last-axis row by `max(norm, NORM_EPS)`; zero rows map to zero.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let w = tx.last_dim();
        let eps = T::of(NORM_EPS);
        let mut norms = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let n = kernels::norm(row).max(eps);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        debug_assert_eq!(out.len(), tx.rows() * w);
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let op = if self.requires_grad(x) {
            Op::L2Normalize { x, norms }
        } else {
            Op::Leaf
        };
        Ok(self.push(t, &[x], op))
    }

    /// Cosine similarity along the last axis: `[.., d] x [.., d] -> [rows]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("cosine_similarity", &[ta.shape(), tb.shape()]));
        }
        let eps = T::of(NORM_EPS);
        let rows = ta.rows();
        let (mut na, mut nb, mut out) = (
            Vec::with_capacity(rows),
            Vec::with_capacity(rows),
            Vec::with_capacity(rows),
        );
        for r in 0..rows {
            let (ra, rb) = (ta.row(r), tb.row(r));
            let (x, y) = (kernels::norm(ra).max(eps), kernels::norm(rb).max(eps));
            na.push(x);
            nb.push(y);
            out.push(kernels::dot(ra, rb) / (x * y));
        }
        let t = Tensor::from_parts(vec![rows], out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let op = if rg { Op::Cosine { a, b, na, nb } } else { Op::Leaf };
        Ok(self.push(t, &[a, b], op))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let c = tl.last_dim();
        let rows = tl.rows();
        if labels.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy_from_logits",
                shapes: vec![tl.shape().to_vec(), vec![labels.len()]],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let mut probs = Vec::with_capacity(tl.len());
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = tl.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::of_usize(rows);
        let op = if self.requires_grad(logits) {
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(Tensor::scalar(loss), &[logits], op))
    }

    /// Rows `ids` of a 2-D table, in order: `[n, w] -> [ids.len(), w]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 || ids.is_empty() || ids.iter().any(|&i| i >= t.shape()[0]) {
            return Err(Error::Shape {
                op: "gather_rows",
                shapes: vec![t.shape().to_vec(), ids.to_vec()],
            });
        }
        let w = t.shape()[1];
        let mut out = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_parts(vec![ids.len(), w], out);
        let op = if self.requires_grad(table) {
            Op::Gather {
                table,
                ids: ids.to_vec(),
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(v, &[table], op))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.last_visits = 0;
        let start = if self.requires_grad(loss) { loss.0 + 1 } else { 0 };
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(start);
        adj.resize_with(start, || None);
        if start > 0 {
            adj[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..start).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.last_visits += 1;
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => kernels::axpy(acc, &g, T::one()),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grad.is_none() {
                *grad = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |da| kernels::matmul_nt_acc(g, tb.data(), n, m, k, da));
                acc(*b, &mut |db| kernels::matmul_tn_acc(ta.data(), g, n, k, m, db));
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                acc(*a, &mut |da| kernels::axpy(da, g, T::one()));
                acc(*b, &mut |db| reduce_broadcast(*bc, g, None, sign, db));
            }
            Op::Mul(a, b, bc) => {
                let (ta, tb) = (val(*a), val(*b));
                let w = tb.len();
                acc(*a, &mut |da| {
                    let bd = tb.data();
                    for (j, d) in da.iter_mut().enumerate() {
                        let y = match bc {
                            Broadcast::Same => bd[j],
                            Broadcast::Scalar => bd[0],
                            Broadcast::Row => bd[j % w],
                        };
                        *d += g[j] * y;
                    }
                });
                acc(*b, &mut |db| reduce_broadcast(*bc, g, Some(ta.data()), T::one(), db));
            }
            Op::Scale(a, s) => acc(*a, &mut |da| kernels::axpy(da, g, *s)),
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = val(*v).shape()[*axis] * inner;
                    acc(*v, &mut |dv| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            kernels::axpy(&mut dv[o * chunk..(o + 1) * chunk], src, T::one());
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = val(*input).shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let n = in_shape[*axis];
                let len = out.shape()[*axis];
                acc(*input, &mut |dx| {
                    for o in 0..outer {
                        let from = (o * n + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        kernels::axpy(&mut dx[from..from + len * inner], src, T::one());
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let s = g[0] / T::of_usize(val(*x).len());
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += s));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let w = val(*x).last_dim();
                let rows = val(*x).rows();
                let gd = val(*gamma).data();
                let wt = T::of_usize(w);
                acc(*x, &mut |dx| {
                    for r in 0..rows {
                        let base = r * w;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..w {
                            let dh = g[base + j] * gd[j];
                            s1 += dh;
                            s2 += dh * xhat[base + j];
                        }
                        for j in 0..w {
                            let dh = g[base + j] * gd[j];
                            dx[base + j] +=
                                inv_std[r] / wt * (wt * dh - s1 - xhat[base + j] * s2);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for r in 0..rows {
                        for j in 0..w {
                            dg[j] += g[r * w + j] * xhat[r * w + j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for r in 0..rows {
                        for j in 0..w {
                            db[j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |dx| {
                    for j in 0..dx.len() {
                        dx[j] += g[j] * kernels::gelu_grad(xd[j]);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |dx| {
                    for j in 0..dx.len() {
                        if xd[j] > T::zero() {
                            dx[j] += g[j];
                        }
                    }
                });
            }
            Op::Abs(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |dx| {
                    for j in 0..dx.len() {
                        if xd[j] > T::zero() {
                            dx[j] += g[j];
                        } else if xd[j] < T::zero() {
                            dx[j] -= g[j];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let dot: T = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..n {
                                dx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |dx| {
                    for j in 0..dx.len() {
                        dx[j] += g[j] / xd[j];
                    }
                });
            }
            Op::Exp(x) => {
                let y = out.data();
                acc(*x, &mut |dx| {
                    for j in 0..dx.len() {
                        dx[j] += g[j] * y[j];
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let eps = T::of(NORM_EPS);
                let w = out.last_dim();
                let y = out.data();
                acc(*x, &mut |dx| {
                    for (r, &n) in norms.iter().enumerate() {
                        let b = r * w;
                        let (yr, gr) = (&y[b..b + w], &g[b..b + w]);
                        if n > eps {
                            let proj = kernels::dot(yr, gr);
                            for j in 0..w {
                                dx[b + j] += (gr[j] - yr[j] * proj) / n;
                            }
                        } else {
                            for j in 0..w {
                                dx[b + j] += gr[j] / n;
                            }
                        }
                    }
                });
            }
            Op::Cosine { a, b, na, nb } => {
                let (ta, tb) = (val(*a), val(*b));
                let w = ta.last_dim();
                let c = out.data();
                let eps = T::of(NORM_EPS);
                let side = |x: &Tensor<T>, y: &Tensor<T>, nx: &[T], ny: &[T], dx: &mut [T]| {
                    for r in 0..c.len() {
                        let (xr, yr) = (x.row(r), y.row(r));
                        // Clamped norms are constants w.r.t. x.
                        let radial = if nx[r] > eps { c[r] / (nx[r] * nx[r]) } else { T::zero() };
                        for j in 0..w {
                            dx[r * w + j] += g[r] * (yr[j] / (nx[r] * ny[r]) - radial * xr[j]);
                        }
                    }
                };
                acc(*a, &mut |da| side(ta, tb, na, nb, da));
                acc(*b, &mut |db| side(tb, ta, nb, na, db));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).last_dim();
                let s = g[0] / T::of_usize(labels.len());
                acc(*logits, &mut |dl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == label { T::one() } else { T::zero() };
                            dl[r * c + k] += s * (probs[r * c + k] - onehot);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let w = val(*table).last_dim();
                acc(*table, &mut |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        kernels::axpy(&mut dt[i * w..(i + 1) * w], &g[r * w..(r + 1) * w], T::one());
                    }
                });
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Adds `sign * g (* other)` into `db`, summing over broadcast positions.
fn reduce_broadcast<T: Scalar>(bc: Broadcast, g: &[T], other: Option<&[T]>, sign: T, db: &mut [T]) {
    let term = |j: usize| other.map_or(g[j], |o| g[j] * o[j]) * sign;
    match bc {
        Broadcast::Same => (0..g.len()).for_each(|j| db[j] += term(j)),
        Broadcast::Scalar => db[0] += (0..g.len()).map(term).sum::<T>(),
        Broadcast::Row => {
            let w = db.len();
            (0..g.len()).for_each(|j| db[j % w] += term(j));
        }
    }
}
