//! Recorded computation graph.
//!
//! Nodes are appended in topological order and evaluated eagerly as they are
//! added, so callers can inspect intermediate values while building (hard
//! negative mining does this). Integer data (token ids, labels, gathered row
//! indices) is stored on the node itself; only named float inputs can be fed
//! again through [`Graph::evaluate`], which replays the whole recording.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Added under the square root by L2 normalization.
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Constant,
    /// `table (V, D)` looked up at `ids (B*T)` -> `(B, T, D)`.
    Embedding { table: NodeId, ids: Vec<u32>, batch: usize, len: usize },
    /// `x (B, T, Cin)`, `w (k, Cin, Cout)`, `b (Cout)` -> `(B, T-k+1, Cout)`.
    /// Windows starting at or past `lens[b]` are left at zero.
    Conv1d { x: NodeId, w: NodeId, b: NodeId, lens: Option<Vec<usize>> },
    /// `(B, T, C)` -> `(B, C)` over the first `lens[b]` positions.
    MaxOverTime { x: NodeId, lens: Option<Vec<usize>> },
    /// `x (B, I)`, `w (I, O)`, `b (O)` -> `(B, O)`.
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    /// 2-D tensors joined along columns.
    Concat(Vec<NodeId>),
    L2Normalize(NodeId),
    /// `(B, E) . (B, E)` -> `(B)`.
    RowDot(NodeId, NodeId),
    /// `a (B, E)` times `b (N, E)` transposed -> `(B, N)`.
    MatMulT(NodeId, NodeId),
    Softmax(NodeId),
    /// Per-row `-log softmax(logits)[label]` -> `(B)`.
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    /// Rows of a 2-D tensor.
    Gather { x: NodeId, rows: Vec<usize> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Embedding { .. } => "embedding",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxOverTime { .. } => "max_over_time",
            Op::Dense { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::Concat(_) => "concat",
            Op::L2Normalize(_) => "l2_normalize",
            Op::RowDot(..) => "row_dot",
            Op::MatMulT(..) => "matmul_t",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Gather { .. } => "gather",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Constant => vec![],
            Op::Embedding { table, .. } => vec![*table],
            Op::Conv1d { x, w, b, .. } | Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::MaxOverTime { x, .. } | Op::Gather { x, .. } => vec![*x],
            Op::Relu(x) | Op::L2Normalize(x) | Op::Softmax(x) | Op::Sum(x) | Op::Mean(x) => vec![*x],
            Op::Scale(x, _) | Op::AddScalar(x, _) => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Concat(xs) => xs.clone(),
            Op::RowDot(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    /// Argmax positions for max-over-time pooling.
    argmax: Vec<usize>,
}

/// A recorded, re-evaluable computation.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    inputs: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    fn push(&mut self, op: Op<T>) -> Result<NodeId> {
        let index = self.nodes.len();
        let (value, argmax) = self.compute(&op, index)?;
        self.nodes.push(Node { op, value, argmax });
        Ok(NodeId(index))
    }

    /// A named, differentiable leaf.
    pub fn input(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::invalid(format!("duplicate graph input {name:?}")));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: "input",
                node: self.nodes.len(),
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Input,
            value,
            argmax: Vec::new(),
        });
        self.inputs.insert(name.into(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            argmax: Vec::new(),
        });
        id
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[u32], batch: usize, len: usize) -> Result<NodeId> {
        self.push(Op::Embedding {
            table,
            ids: ids.to_vec(),
            batch,
            len,
        })
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, lens: Option<&[usize]>) -> Result<NodeId> {
        self.push(Op::Conv1d {
            x,
            w,
            b,
            lens: lens.map(<[usize]>::to_vec),
        })
    }

    pub fn max_over_time(&mut self, x: NodeId, lens: Option<&[usize]>) -> Result<NodeId> {
        self.push(Op::MaxOverTime {
            x,
            lens: lens.map(<[usize]>::to_vec),
        })
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Dense { x, w, b })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(x))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat(xs.to_vec()))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::L2Normalize(x))
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::RowDot(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMulT(a, b))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(x))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push(Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    pub fn gather(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.push(Op::Gather {
            x,
            rows: rows.to_vec(),
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.push(Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.push(Op::AddScalar(x, c))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(x))
    }

    /// Replaces the named inputs and recomputes every node.
    pub fn evaluate(&mut self, feed: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, value) in feed {
            let id = self
                .input_id(name)
                .ok_or_else(|| Error::invalid(format!("graph has no input {name:?}")))?;
            let node = &mut self.nodes[id.0];
            if node.value.shape() != value.shape() {
                return Err(Error::shape(
                    "input",
                    format!("{name}: expected {:?}, got {:?}", node.value.shape(), value.shape()),
                ));
            }
            node.value = value.clone();
        }
        for index in 0..self.nodes.len() {
            if matches!(self.nodes[index].op, Op::Input | Op::Constant) {
                continue;
            }
            let op = core::mem::replace(&mut self.nodes[index].op, Op::Constant);
            let out = self.compute(&op, index);
            self.nodes[index].op = op;
            let (value, argmax) = out?;
            self.nodes[index].value = value;
            self.nodes[index].argmax = argmax;
        }
        Ok(())
    }

    fn compute(&self, op: &Op<T>, index: usize) -> Result<(Tensor<T>, Vec<usize>)> {
        let name = op.name();
        for id in op.operands() {
            if id.0 >= index {
                return Err(Error::shape(name, "operand refers to a later node"));
            }
        }
        let v = |id: NodeId| &self.nodes[id.0].value;
        let mut argmax = Vec::new();
        let out = match op {
            Op::Input | Op::Constant => unreachable!("leaves are never recomputed"),
            Op::Embedding {
                table,
                ids,
                batch,
                len,
            } => forward::embedding(v(*table), ids, *batch, *len)?,
            Op::Conv1d { x, w, b, lens } => forward::conv1d(v(*x), v(*w), v(*b), lens.as_deref())?,
            Op::MaxOverTime { x, lens } => {
                let (out, idx) = forward::max_over_time(v(*x), lens.as_deref())?;
                argmax = idx;
                out
            }
            Op::Dense { x, w, b } => forward::dense(v(*x), v(*w), v(*b))?,
            Op::Relu(x) => map(v(*x), |a| if a > T::zero() { a } else { T::zero() }),
            Op::Concat(xs) => forward::concat(&xs.iter().map(|&x| v(x)).collect::<Vec<_>>())?,
            Op::L2Normalize(x) => forward::l2_normalize(v(*x))?,
            Op::RowDot(a, b) => forward::row_dot(v(*a), v(*b))?,
            Op::MatMulT(a, b) => forward::matmul_t(v(*a), v(*b))?,
            Op::Softmax(x) => forward::softmax(v(*x))?,
            Op::SoftmaxCrossEntropy { logits, labels } => forward::softmax_xent(v(*logits), labels)?,
            Op::Gather { x, rows } => forward::gather(v(*x), rows)?,
            Op::Add(a, b) => zip(name, v(*a), v(*b), |x, y| x + y)?,
            Op::Sub(a, b) => zip(name, v(*a), v(*b), |x, y| x - y)?,
            Op::Mul(a, b) => zip(name, v(*a), v(*b), |x, y| x * y)?,
            Op::Scale(x, c) => map(v(*x), |a| a * *c),
            Op::AddScalar(x, c) => map(v(*x), |a| a + *c),
            Op::Sum(x) => Tensor::scalar(v(*x).data().iter().copied().sum()),
            Op::Mean(x) => {
                let t = v(*x);
                if t.is_empty() {
                    return Err(Error::shape(name, "mean of an empty tensor"));
                }
                Tensor::scalar(t.data().iter().copied().sum::<T>() / T::of(t.len() as f64))
            }
        };
        if !out.all_finite() {
            return Err(Error::NonFinite { op: name, node: index });
        }
        Ok((out, argmax))
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to the named
    /// inputs. Inputs the loss does not depend on get zero gradients.
    pub fn gradients(&self, loss: NodeId, wrt: &[&str]) -> Result<BTreeMap<String, Tensor<T>>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "gradients",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut targets = Vec::with_capacity(wrt.len());
        for &name in wrt {
            let id = self
                .input_id(name)
                .ok_or_else(|| Error::invalid(format!("graph has no input {name:?}")))?;
            targets.push((name, id));
        }
        // Only propagate into nodes that lead to a requested input.
        let mut needs = vec![false; self.nodes.len()];
        for &(_, id) in &targets {
            needs[id.0] = true;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !needs[i] && node.op.operands().iter().any(|o| needs[o.0]) {
                needs[i] = true;
            }
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            self.backward(i, &g, &needs, &mut grads);
            grads[i] = Some(g);
        }
        Ok(targets
            .into_iter()
            .map(|(name, id)| {
                let g = grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()));
                (name.into(), g)
            })
            .collect())
    }

    fn backward(&self, i: usize, g: &Tensor<T>, needs: &[bool], grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let v = |id: NodeId| &self.nodes[id.0].value;
        let out = &node.value;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [T])| {
            if !needs[id.0] {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape()));
            f(slot.data_mut());
        };
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Constant => {}
            Op::Embedding { table, ids, .. } => {
                let d = v(*table).cols();
                acc(*table, &mut |gt| {
                    for (pos, &id) in ids.iter().enumerate() {
                        let row = &mut gt[id as usize * d..(id as usize + 1) * d];
                        for (r, &x) in row.iter_mut().zip(&gd[pos * d..(pos + 1) * d]) {
                            *r = *r + x;
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, lens } => {
                backward::conv1d(v(*x), v(*w), gd, out.shape(), lens.as_deref(), |which, f| {
                    let id = [*x, *w, *b][which];
                    acc(id, f)
                });
            }
            Op::MaxOverTime { x, .. } => {
                let s = v(*x).shape();
                let (t, c) = (s[1], s[2]);
                acc(*x, &mut |gx| {
                    for (bc, &pos) in node.argmax.iter().enumerate() {
                        let (bi, ci) = (bc / c, bc % c);
                        let k = (bi * t + pos) * c + ci;
                        gx[k] = gx[k] + gd[bc];
                    }
                });
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (v(*x), v(*w));
                let (rows, inp, outw) = (xv.rows(), xv.cols(), wv.cols());
                acc(*w, &mut |gw| {
                    for r in 0..rows {
                        let grow = &gd[r * outw..(r + 1) * outw];
                        for (ii, &xi) in xv.row(r).iter().enumerate() {
                            if xi == T::zero() {
                                continue;
                            }
                            axpy(&mut gw[ii * outw..(ii + 1) * outw], xi, grow);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..rows {
                        for (a, &x) in gb.iter_mut().zip(&gd[r * outw..(r + 1) * outw]) {
                            *a = *a + x;
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let grow = &gd[r * outw..(r + 1) * outw];
                        for ii in 0..inp {
                            gx[r * inp + ii] = gx[r * inp + ii] + dot(wv.row(ii), grow);
                        }
                    }
                });
            }
            Op::Relu(x) => acc(*x, &mut |gx| {
                for ((a, &o), &gg) in gx.iter_mut().zip(out.data()).zip(gd) {
                    if o > T::zero() {
                        *a = *a + gg;
                    }
                }
            }),
            Op::Concat(xs) => {
                let rows = out.rows();
                let total = out.cols();
                let mut start = 0;
                for &x in xs {
                    let w = v(x).cols();
                    acc(x, &mut |gx| {
                        for r in 0..rows {
                            for j in 0..w {
                                gx[r * w + j] = gx[r * w + j] + gd[r * total + start + j];
                            }
                        }
                    });
                    start += w;
                }
            }
            Op::L2Normalize(x) => {
                let xv = v(*x);
                let cols = xv.cols();
                acc(*x, &mut |gx| {
                    for r in 0..xv.rows() {
                        let xr = xv.row(r);
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let s = (xr.iter().map(|&a| a * a).sum::<T>() + T::of(L2_EPS)).sqrt();
                        let xg = dot(xr, gr);
                        let s3 = s * s * s;
                        for j in 0..cols {
                            let k = r * cols + j;
                            gx[k] = gx[k] + gr[j] / s - xr[j] * xg / s3;
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let cols = av.cols();
                acc(*a, &mut |ga| {
                    for (k, x) in ga.iter_mut().enumerate() {
                        *x = *x + gd[k / cols] * bv.data()[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for (k, x) in gb.iter_mut().enumerate() {
                        *x = *x + gd[k / cols] * av.data()[k];
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let (n, e) = (bv.rows(), bv.cols());
                acc(*a, &mut |ga| {
                    for r in 0..av.rows() {
                        for j in 0..n {
                            axpy(&mut ga[r * e..(r + 1) * e], gd[r * n + j], bv.row(j));
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..av.rows() {
                        for j in 0..n {
                            axpy(&mut gb[j * e..(j + 1) * e], gd[r * n + j], av.row(r));
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = out.cols();
                acc(*x, &mut |gx| {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let yg = dot(y, gr);
                        for j in 0..cols {
                            gx[r * cols + j] = gx[r * cols + j] + y[j] * (gr[j] - yg);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let lv = v(*logits);
                let cols = lv.cols();
                acc(*logits, &mut |gx| {
                    for (r, &label) in labels.iter().enumerate() {
                        let p = forward::softmax_row(lv.row(r));
                        for j in 0..cols {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            gx[r * cols + j] = gx[r * cols + j] + gd[r] * (p[j] - onehot);
                        }
                    }
                });
            }
            Op::Gather { x, rows } => {
                let cols = v(*x).cols();
                acc(*x, &mut |gx| {
                    for (k, &row) in rows.iter().enumerate() {
                        for j in 0..cols {
                            gx[row * cols + j] = gx[row * cols + j] + gd[k * cols + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| {
                    for (x, &gg) in gb.iter_mut().zip(gd) {
                        *x = *x - gg;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                acc(*a, &mut |ga| {
                    for ((x, &gg), &o) in ga.iter_mut().zip(gd).zip(bv.data()) {
                        *x = *x + gg * o;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, &gg), &o) in gb.iter_mut().zip(gd).zip(av.data()) {
                        *x = *x + gg * o;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (a, &gg) in gx.iter_mut().zip(gd) {
                    *a = *a + gg * *c;
                }
            }),
            Op::AddScalar(x, _) => acc(*x, &mut |gx| add_into(gx, gd)),
            Op::Sum(x) => acc(*x, &mut |gx| {
                for a in gx.iter_mut() {
                    *a = *a + gd[0];
                }
            }),
            Op::Mean(x) => {
                let n = T::of(v(*x).len() as f64);
                acc(*x, &mut |gx| {
                    for a in gx.iter_mut() {
                        *a = *a + gd[0] / n;
                    }
                })
            }
        }
    }
}

/// Central-difference check of `loss` around `point`.
///
/// Sets every tensor in `point` as the current input value, computes the
/// analytic gradient, then perturbs each coordinate by `±h`. Returns the
/// largest `|analytic - numeric| / max(1, |numeric|)`. The graph is left
/// evaluated at `point`.
pub fn grad_check(
    g: &mut Graph<f64>,
    loss: NodeId,
    point: &BTreeMap<String, Tensor<f64>>,
    h: f64,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::invalid(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    g.evaluate(point)?;
    let names: Vec<&str> = point.keys().map(String::as_str).collect();
    let analytic = g.gradients(loss, &names)?;
    let mut worst: f64 = 0.0;
    let mut feed = point.clone();
    for name in &names {
        for k in 0..point[*name].len() {
            let x0 = point[*name].data()[k];
            let mut at = |x: f64| -> Result<f64> {
                feed.get_mut(*name).expect("name from point").data_mut()[k] = x;
                g.evaluate(&feed)?;
                Ok(g.value(loss).data()[0])
            };
            let numeric = (at(x0 + h)? - at(x0 - h)?) / (2.0 * h);
            at(x0)?;
            let a = analytic[*name].data()[k];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    g.evaluate(point)?;
    Ok(worst)
}

fn map<T: Scalar>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

fn zip<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::shape(op, format!("expected rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}

mod forward {
    use super::*;

    pub(super) fn embedding<T: Scalar>(table: &Tensor<T>, ids: &[u32], batch: usize, len: usize) -> Result<Tensor<T>> {
        expect_rank("embedding", table, 2)?;
        if ids.len() != batch * len {
            return Err(Error::shape("embedding", format!("{} ids for a {batch}x{len} batch", ids.len())));
        }
        let (v, d) = (table.rows(), table.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::shape("embedding", format!("token id {id} outside vocabulary of {v}")));
            }
            out.extend_from_slice(table.row(id as usize));
        }
        Tensor::new(vec![batch, len, d], out)
    }

    fn valid_windows(lens: Option<&[usize]>, b: usize, t_out: usize) -> usize {
        lens.map_or(t_out, |l| l[b].min(t_out))
    }

    pub(super) fn conv1d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>, lens: Option<&[usize]>) -> Result<Tensor<T>> {
        expect_rank("conv1d", x, 3)?;
        expect_rank("conv1d", w, 3)?;
        let (batch, t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if wcin != cin || bias.len() != cout || k == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?}, kernel {:?}, bias {:?}", x.shape(), w.shape(), bias.shape()),
            ));
        }
        if k > t {
            return Err(Error::shape("conv1d", format!("kernel {k} longer than sequence {t}")));
        }
        if let Some(l) = lens {
            if l.len() != batch {
                return Err(Error::shape("conv1d", "one length per batch row required"));
            }
        }
        let t_out = t - k + 1;
        let span = k * cin;
        let mut out = vec![T::zero(); batch * t_out * cout];
        for b in 0..batch {
            for p in 0..valid_windows(lens, b, t_out) {
                let window = &x.data()[(b * t + p) * cin..(b * t + p) * cin + span];
                let o = &mut out[(b * t_out + p) * cout..(b * t_out + p + 1) * cout];
                o.copy_from_slice(bias.data());
                for (i, &xi) in window.iter().enumerate() {
                    axpy(o, xi, &w.data()[i * cout..(i + 1) * cout]);
                }
            }
        }
        Tensor::new(vec![batch, t_out, cout], out)
    }

    pub(super) fn max_over_time<T: Scalar>(x: &Tensor<T>, lens: Option<&[usize]>) -> Result<(Tensor<T>, Vec<usize>)> {
        expect_rank("max_over_time", x, 3)?;
        let (batch, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if let Some(l) = lens {
            if l.len() != batch {
                return Err(Error::shape("max_over_time", "one length per batch row required"));
            }
        }
        let mut out = Vec::with_capacity(batch * c);
        let mut idx = Vec::with_capacity(batch * c);
        for b in 0..batch {
            let valid = valid_windows(lens, b, t);
            if valid == 0 {
                return Err(Error::shape("max_over_time", format!("row {b} has no unmasked positions")));
            }
            let mut best: Vec<T> = x.data()[b * t * c..(b * t + 1) * c].to_vec();
            let mut at = vec![0usize; c];
            for p in 1..valid {
                let row = &x.data()[(b * t + p) * c..(b * t + p + 1) * c];
                for j in 0..c {
                    // strict: ties keep the lowest position
                    if row[j] > best[j] {
                        best[j] = row[j];
                        at[j] = p;
                    }
                }
            }
            out.extend(best);
            idx.extend(at);
        }
        Ok((Tensor::new(vec![batch, c], out)?, idx))
    }

    pub(super) fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank("dense", x, 2)?;
        expect_rank("dense", w, 2)?;
        let (rows, inp) = (x.rows(), x.cols());
        let outw = w.cols();
        if w.rows() != inp || b.len() != outw {
            return Err(Error::shape(
                "dense",
                format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let mut out = Vec::with_capacity(rows * outw);
        for r in 0..rows {
            let mut o = b.data().to_vec();
            for (i, &xi) in x.row(r).iter().enumerate() {
                if xi != T::zero() {
                    axpy(&mut o, xi, w.row(i));
                }
            }
            out.extend(o);
        }
        Tensor::new(vec![rows, outw], out)
    }

    pub(super) fn concat<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let Some(first) = xs.first() else {
            return Err(Error::shape("concat", "nothing to concatenate"));
        };
        let rows = first.rows();
        for x in xs {
            expect_rank("concat", x, 2)?;
            if x.rows() != rows {
                return Err(Error::shape("concat", format!("row counts differ: {rows} vs {}", x.rows())));
            }
        }
        let total: usize = xs.iter().map(|x| x.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for x in xs {
                out.extend_from_slice(x.row(r));
            }
        }
        Tensor::new(vec![rows, total], out)
    }

    pub(super) fn l2_normalize<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank("l2_normalize", x, 2)?;
        let mut out = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let row = x.row(r);
            let s = (row.iter().map(|&a| a * a).sum::<T>() + T::of(L2_EPS)).sqrt();
            out.extend(row.iter().map(|&a| a / s));
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    pub(super) fn row_dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank("row_dot", a, 2)?;
        if a.shape() != b.shape() {
            return Err(Error::shape("row_dot", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(Tensor::vector((0..a.rows()).map(|r| dot(a.row(r), b.row(r))).collect()))
    }

    pub(super) fn matmul_t<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank("matmul_t", a, 2)?;
        expect_rank("matmul_t", b, 2)?;
        if a.cols() != b.cols() {
            return Err(Error::shape("matmul_t", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let mut out = Vec::with_capacity(a.rows() * b.rows());
        for r in 0..a.rows() {
            for j in 0..b.rows() {
                out.push(dot(a.row(r), b.row(j)));
            }
        }
        Tensor::new(vec![a.rows(), b.rows()], out)
    }

    pub(super) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        e.into_iter().map(|x| x / s).collect()
    }

    pub(super) fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank("softmax", x, 2)?;
        let mut out = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            out.extend(softmax_row(x.row(r)));
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    pub(super) fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        expect_rank("softmax_cross_entropy", logits, 2)?;
        if labels.len() != logits.rows() {
            return Err(Error::shape("softmax_cross_entropy", "one label per row required"));
        }
        let mut out = Vec::with_capacity(labels.len());
        for (r, &label) in labels.iter().enumerate() {
            let row = logits.row(r);
            if label >= row.len() {
                return Err(Error::shape("softmax_cross_entropy", format!("label {label} outside {} classes", row.len())));
            }
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            out.push(lse - row[label]);
        }
        Ok(Tensor::vector(out))
    }

    pub(super) fn gather<T: Scalar>(x: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
        expect_rank("gather", x, 2)?;
        let mut out = Vec::with_capacity(rows.len() * x.cols());
        for &r in rows {
            if r >= x.rows() {
                return Err(Error::shape("gather", format!("row {r} outside {} rows", x.rows())));
            }
            out.extend_from_slice(x.row(r));
        }
        Tensor::new(vec![rows.len(), x.cols()], out)
    }
}

mod backward {
    use super::*;

    /// Gradients for conv1d; `acc(0|1|2, f)` accumulates into x, w or b.
    /// Max pooling makes the upstream gradient sparse, so rows and channels
    /// with zero gradient are skipped.
    pub(super) fn conv1d<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        gd: &[T],
        out_shape: &[usize],
        lens: Option<&[usize]>,
        mut acc: impl FnMut(usize, &mut dyn FnMut(&mut [T])),
    ) {
        let (batch, t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, cout) = (w.shape()[0], w.shape()[2]);
        let t_out = out_shape[1];
        let span = k * cin;
        // (b, p, nonzero channels)
        let mut active: Vec<(usize, usize, Vec<usize>)> = Vec::new();
        for b in 0..batch {
            let valid = lens.map_or(t_out, |l| l[b].min(t_out));
            for p in 0..valid {
                let g = &gd[(b * t_out + p) * cout..(b * t_out + p + 1) * cout];
                let nz: Vec<usize> = (0..cout).filter(|&c| g[c] != T::zero()).collect();
                if !nz.is_empty() {
                    active.push((b, p, nz));
                }
            }
        }
        let grad_row = |b: usize, p: usize| &gd[(b * t_out + p) * cout..(b * t_out + p + 1) * cout];
        acc(2, &mut |gb| {
            for (b, p, nz) in &active {
                let g = grad_row(*b, *p);
                for &c in nz {
                    gb[c] = gb[c] + g[c];
                }
            }
        });
        acc(1, &mut |gw| {
            for (b, p, nz) in &active {
                let g = grad_row(*b, *p);
                let window = &x.data()[(b * t + p) * cin..(b * t + p) * cin + span];
                if nz.len() * 4 >= cout {
                    for (i, &xi) in window.iter().enumerate() {
                        axpy(&mut gw[i * cout..(i + 1) * cout], xi, g);
                    }
                } else {
                    for &c in nz {
                        for (i, &xi) in window.iter().enumerate() {
                            gw[i * cout + c] = gw[i * cout + c] + xi * g[c];
                        }
                    }
                }
            }
        });
        acc(0, &mut |gx| {
            for (b, p, nz) in &active {
                let g = grad_row(*b, *p);
                let base = (b * t + p) * cin;
                if nz.len() * 4 >= cout {
                    for i in 0..span {
                        gx[base + i] = gx[base + i] + dot(&w.data()[i * cout..(i + 1) * cout], g);
                    }
                } else {
                    for i in 0..span {
                        let wr = &w.data()[i * cout..(i + 1) * cout];
                        let s = nz.iter().fold(T::zero(), |s, &c| s + wr[c] * g[c]);
                        gx[base + i] = gx[base + i] + s;
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn point(g: &Graph<f64>) -> BTreeMap<String, Tensor<f64>> {
        g.input_names()
            .map(|n| (n.into(), g.value(g.input_id(n).unwrap()).clone()))
            .collect()
    }

    fn check(g: &mut Graph<f64>, loss: NodeId) -> f64 {
        let p = point(g);
        grad_check(g, loss, &p, 1e-5).unwrap()
    }

    #[test]
    fn dense_identity_and_relu() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", Tensor::matrix(1, 2, vec![3.0, -4.0]).unwrap()).unwrap();
        let w = g.input("w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let b = g.input("b", Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -4.0]);
        let v = g.constant(Tensor::vector(vec![-1.0, 2.0]));
        let r = g.relu(v).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
    }

    #[test]
    fn masked_max_pool_ignores_padding() {
        let mut g = Graph::<f64>::new();
        // (1, 5, 2): the big values sit in the masked tail
        let data = vec![0.1, 0.5, 0.3, -0.2, 0.2, 0.4, 9.0, 9.0, 8.0, 7.0];
        let x = g.input("x", Tensor::new(vec![1, 5, 2], data.clone()).unwrap()).unwrap();
        let m = g.max_over_time(x, Some(&[3])).unwrap();
        let brute: Vec<f64> = (0..2)
            .map(|c| (0..3).map(|p| data[p * 2 + c]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        assert_eq!(g.value(m).data(), &brute[..]);
        let unmasked = g.max_over_time(x, None).unwrap();
        assert_eq!(g.value(unmasked).data(), &[9.0, 9.0]);
    }

    #[test]
    fn max_pool_ties_route_to_lowest_index() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", Tensor::new(vec![1, 3, 1], vec![1.0, 1.0, 0.0]).unwrap()).unwrap();
        let m = g.max_over_time(x, None).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.gradients(s, &["x"]).unwrap();
        assert_eq!(grads["x"].data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let unused = g.input("u", Tensor::matrix(2, 3, vec![1.0; 6]).unwrap()).unwrap();
        let _ = unused;
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.gradients(loss, &["x", "u"]).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, 4.0]);
        assert_eq!(grads["u"], Tensor::zeros(&[2, 3]));
        // non-scalar loss
        assert!(matches!(g.gradients(sq, &["x"]), Err(Error::Shape { .. })));
        assert!(g.gradients(loss, &["nope"]).is_err());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let w = g.input("w", Tensor::matrix(2, 2, vec![0.0; 4]).unwrap()).unwrap();
        let b = g.input("b", Tensor::vector(vec![0.0; 2])).unwrap();
        match g.dense(x, w, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "dense"),
            other => panic!("{other:?}"),
        }
        assert!(g.input("x", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", Tensor::vector(vec![1e308])).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { op: "scale", .. })));
        assert!(g.input("y", Tensor::vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn evaluate_replays_with_new_inputs() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let s = g.scale(x, 3.0).unwrap();
        let total = g.sum(s).unwrap();
        assert_eq!(g.value(total).data(), &[9.0]);
        let feed = [("x".into(), Tensor::vector(vec![2.0, 2.0]))].into_iter().collect();
        g.evaluate(&feed).unwrap();
        assert_eq!(g.value(total).data(), &[12.0]);
        let bad = [("x".into(), Tensor::vector(vec![2.0]))].into_iter().collect();
        assert!(g.evaluate(&bad).is_err());
    }

    #[test]
    fn normalize_and_softmax_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.input("x", rand_tensor(&mut rng, &[4, 6])).unwrap();
        let n = g.l2_normalize(x).unwrap();
        for r in 0..4 {
            let norm: f64 = g.value(n).row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        let p = g.softmax(x).unwrap();
        let ce = g.softmax_cross_entropy(x, &[0, 1, 2, 5]).unwrap();
        for (r, &label) in [0usize, 1, 2, 5].iter().enumerate() {
            let row = g.value(p).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!((g.value(ce).data()[r] + row[label].ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn primitive_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            // dense + relu + mean
            let mut g = Graph::<f64>::new();
            let x = g.input("x", rand_tensor(&mut rng, &[3, 4])).unwrap();
            let w = g.input("w", rand_tensor(&mut rng, &[4, 5])).unwrap();
            let b = g.input("b", rand_tensor(&mut rng, &[5])).unwrap();
            let d = g.dense(x, w, b).unwrap();
            let r = g.relu(d).unwrap();
            let loss = g.mean(r).unwrap();
            assert!(check(&mut g, loss) < 1e-5);

            // embedding + conv bank + masked max pool + concat
            let mut g = Graph::<f64>::new();
            let table = g.input("table", rand_tensor(&mut rng, &[7, 3])).unwrap();
            let ids: Vec<u32> = (0..2 * 9).map(|_| rng.gen_range(0..7)).collect();
            let e = g.embedding(table, &ids, 2, 9).unwrap();
            let mut pooled = Vec::new();
            for k in [2usize, 3] {
                let w = g.input(&format!("w{k}"), rand_tensor(&mut rng, &[k, 3, 4])).unwrap();
                let b = g.input(&format!("b{k}"), rand_tensor(&mut rng, &[4])).unwrap();
                let c = g.conv1d(e, w, b, Some(&[9, 5])).unwrap();
                pooled.push(g.max_over_time(c, Some(&[9, 5])).unwrap());
            }
            let cat = g.concat(&pooled).unwrap();
            let sq = g.mul(cat, cat).unwrap();
            let loss = g.sum(sq).unwrap();
            assert!(check(&mut g, loss) < 1e-5);

            // l2 normalize, row dot, matmul_t, gather, softmax, cross-entropy
            let mut g = Graph::<f64>::new();
            let a = g.input("a", rand_tensor(&mut rng, &[3, 4])).unwrap();
            let t = g.input("t", rand_tensor(&mut rng, &[5, 4])).unwrap();
            let an = g.l2_normalize(a).unwrap();
            let tn = g.l2_normalize(t).unwrap();
            let pos = g.gather(tn, &[0, 2, 2]).unwrap();
            let sims = g.row_dot(an, pos).unwrap();
            let hinge = g.add_scalar(sims, 0.3).unwrap();
            let h = g.relu(hinge).unwrap();
            let all = g.matmul_t(an, tn).unwrap();
            let sm = g.softmax(all).unwrap();
            let ce = g.softmax_cross_entropy(all, &[1, 4, 0]).unwrap();
            let s1 = g.sum(sm).unwrap();
            let sub = g.sub(ce, h).unwrap();
            let s2 = g.mean(sub).unwrap();
            let sum = g.add(s1, s2).unwrap();
            let m2 = g.mul(sm, sm).unwrap();
            let s3 = g.sum(m2).unwrap();
            let tot = g.add(sum, s3).unwrap();
            let loss = g.scale(tot, 0.5).unwrap();
            assert!(check(&mut g, loss) < 1e-5);
        }
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", Tensor::vector(vec![1.0])).unwrap();
        let s = g.sum(x).unwrap();
        let p = point(&g);
        assert!(grad_check(&mut g, s, &p, 0.1).is_err());
        assert!(grad_check(&mut g, s, &p, 1e-4).unwrap() < 1e-9);
    }
}
