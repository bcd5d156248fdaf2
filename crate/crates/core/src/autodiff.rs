//! Reverse-mode differentiation over a recorded operation graph.
//!
//! A `Graph` records every executed op in topological order together with its
//! cached output value. `backward` walks the record in reverse from a scalar
//! root, accumulates adjoints by the chain rule, writes gradients into the
//! trainable `Variable`s that were tracked on the graph, and clears the
//! record. One graph per training step; graphs are not shared across threads.

use crate::tensor::{Tensor, TensorError, Variable};

/// Handle to a node on a `Graph`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    Sigmoid(NodeId),
    Relu(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Softmax(NodeId, usize),
    Mean(NodeId),
    Concat(Vec<NodeId>, usize),
    RowScale(NodeId, NodeId),
    RowNormalize(NodeId),
    GatherRows(NodeId, Vec<usize>),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        ignore_index: Option<usize>,
        live: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

struct LeafBinding {
    node: NodeId,
    name: String,
    trainable: bool,
}

/// Recorded forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: Vec<LeafBinding>,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(x: &Tensor) -> Vec<f64> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = xd[i * c + j];
        }
    }
    out
}

/// Lane decomposition for an axis reduction: iterate `outer * inner` lanes of
/// length `len`, where lane elements are `inner` apart.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Insert a value the graph treats as a constant: gradients flow through
    /// it but are never surfaced.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Track a variable's current value. Its adjoint is written back to the
    /// variable by `backward` when the variable is trainable.
    pub fn var(&mut self, variable: &Variable) -> Result<NodeId, TensorError> {
        if self.leaves.iter().any(|l| l.name == variable.name()) {
            return Err(TensorError::DuplicateVariable(variable.name().to_string()));
        }
        let id = self.push(Op::Leaf, variable.value().clone());
        self.leaves.push(LeafBinding {
            node: id,
            name: variable.name().to_string(),
            trainable: variable.trainable(),
        });
        Ok(id)
    }

    fn check(&self, op: &'static str, id: NodeId) -> Result<(), TensorError> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::UnknownNode(id.0));
        }
        let _ = op;
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check("matmul", a)?;
        self.check("matmul", b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let shape = vec![sa[0], sb[1]];
        let data = matmul_raw(self.value(a), self.value(b));
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(shape, data)))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check("transpose", x)?;
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(TensorError::BadRank {
                op: "transpose",
                expected: 2,
                shape: s.to_vec(),
            });
        }
        let shape = vec![s[1], s[0]];
        let data = transpose_raw(self.value(x));
        Ok(self.push(Op::Transpose(x), Tensor::from_parts(shape, data)))
    }

    fn zip(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        self.check(op_name, a)?;
        self.check(op_name, b)?;
        self.same_shape(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(op, Tensor::from_parts(shape, data)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn map(
        &mut self,
        op_name: &'static str,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        self.check(op_name, x)?;
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(op, Tensor::from_parts(shape, data)))
    }

    pub fn scalar_mul(&mut self, x: NodeId, k: f64) -> Result<NodeId, TensorError> {
        self.map("scalar_mul", x, |v| v * k, Op::ScalarMul(x, k))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sin(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.map("sin", x, f64::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.map("cos", x, f64::cos, Op::Cos(x))
    }

    /// Softmax along `axis`, stable under constant shifts.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.check("softmax", x)?;
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(xd[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (xd[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= sum;
                }
            }
        }
        Ok(self.push(Op::Softmax(x, axis), Tensor::from_parts(shape, out)))
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check("mean", x)?;
        let xd = self.value(x).data();
        let m = xd.iter().sum::<f64>() / xd.len() as f64;
        Ok(self.push(Op::Mean(x), Tensor::scalar(m)))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        for &x in xs {
            self.check("concat", x)?;
        }
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::BadAxis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut axis_total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; shape.iter().product()];
        let row_out = axis_total * inner;
        for o in 0..outer {
            let mut offset = 0;
            for &x in xs {
                let s_axis = self.value(x).shape()[axis];
                let block = s_axis * inner;
                let src = &self.value(x).data()[o * block..(o + 1) * block];
                out[o * row_out + offset..o * row_out + offset + block].copy_from_slice(src);
                offset += block;
            }
        }
        Ok(self.push(Op::Concat(xs.to_vec(), axis), Tensor::from_parts(shape, out)))
    }

    /// Scale row `r` of a rank-2 tensor by `s[r]`.
    pub fn row_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        self.check("row_scale", x)?;
        self.check("row_scale", s)?;
        let xs = self.value(x).shape().to_vec();
        let ss = self.value(s).shape().to_vec();
        if xs.len() != 2 || ss.len() != 1 || ss[0] != xs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "row_scale",
                lhs: xs,
                rhs: ss,
            });
        }
        let (r, c) = (xs[0], xs[1]);
        let mut out = vec![0.0; r * c];
        let (xd, sd) = (self.value(x).data(), self.value(s).data());
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] * sd[i];
            }
        }
        Ok(self.push(Op::RowScale(x, s), Tensor::from_parts(xs, out)))
    }

    /// Divide each row of a rank-2 tensor by its sum.
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check("row_normalize", x)?;
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::BadRank {
                op: "row_normalize",
                expected: 2,
                shape,
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let s: f64 = xd[i * c..(i + 1) * c].iter().sum();
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] / s;
            }
        }
        Ok(self.push(Op::RowNormalize(x), Tensor::from_parts(shape, out)))
    }

    /// Select rows of a rank-2 tensor; duplicates allowed.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        self.check("gather_rows", x)?;
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(TensorError::BadRank {
                op: "gather_rows",
                expected: 2,
                shape: s.to_vec(),
            });
        }
        if rows.is_empty() {
            return Err(TensorError::EmptyInput { op: "gather_rows" });
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::TargetOutOfRange {
                position: rows.iter().position(|&i| i == bad).unwrap(),
                target: bad,
                classes: r,
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Op::GatherRows(x, rows.to_vec()),
            Tensor::from_parts(vec![rows.len(), c], out),
        ))
    }

    /// Mean over non-ignored positions of `-log softmax(logits)[target]`.
    /// `logits` is positions x classes; `targets` one class index per position.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<NodeId, TensorError> {
        self.check("cross_entropy", logits)?;
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let k = s[1];
        let mut live = 0usize;
        for (pos, &t) in targets.iter().enumerate() {
            if Some(t) == ignore_index {
                continue;
            }
            if t >= k {
                return Err(TensorError::TargetOutOfRange {
                    position: pos,
                    target: t,
                    classes: k,
                });
            }
            live += 1;
        }
        if live == 0 {
            return Err(TensorError::AllPositionsIgnored);
        }
        let xd = self.value(logits).data();
        let mut total = 0.0;
        for (pos, &t) in targets.iter().enumerate() {
            if Some(t) == ignore_index {
                continue;
            }
            let row = &xd[pos * k..(pos + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            // ln(sum exp(v-max)) - (row[t]-max) avoids cancellation when the
            // target dominates.
            let lnsum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lnsum - (row[t] - max);
        }
        let loss = total / live as f64;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                live,
            },
            Tensor::scalar(loss),
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Adjoints of tracked trainable
    /// leaves are accumulated into the matching variables' `grad` fields;
    /// the recorded graph is cleared afterwards.
    pub fn backward(
        &mut self,
        root: NodeId,
        variables: &mut [&mut Variable],
    ) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyGraph);
        }
        self.check("backward", root)?;
        if !self.value(root).is_scalar() {
            return Err(TensorError::NonScalarRoot {
                shape: self.value(root).shape().to_vec(),
            });
        }

        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let grad = match adjoints[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {
                    adjoints[idx] = Some(grad); // keep for variable write-back
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    {
                        let da = acc(&mut adjoints, a, m * k);
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += grad[i * n + j] * bv.data()[p * n + j];
                                }
                                da[i * k + p] += s;
                            }
                        }
                    }
                    let db = acc(&mut adjoints, b, k * n);
                    let ad = self.value(a).data();
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ad[i * k + p] * grad[i * n + j];
                            }
                            db[p * n + j] += s;
                        }
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = {
                        let s = self.value(x).shape();
                        (s[0], s[1])
                    };
                    let dx = acc(&mut adjoints, x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += grad[j * r + i];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut adjoints, a, grad.len()), &grad, 1.0);
                    add_into(acc(&mut adjoints, b, grad.len()), &grad, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut adjoints, a, grad.len()), &grad, 1.0);
                    add_into(acc(&mut adjoints, b, grad.len()), &grad, -1.0);
                }
                Op::Mul(a, b) => {
                    {
                        let bv = self.value(b).data().to_vec();
                        let da = acc(&mut adjoints, a, grad.len());
                        for (i, g) in grad.iter().enumerate() {
                            da[i] += g * bv[i];
                        }
                    }
                    let av = self.value(a).data().to_vec();
                    let db = acc(&mut adjoints, b, grad.len());
                    for (i, g) in grad.iter().enumerate() {
                        db[i] += g * av[i];
                    }
                }
                Op::Div(a, b) => {
                    let av = self.value(a).data().to_vec();
                    let bv = self.value(b).data().to_vec();
                    {
                        let da = acc(&mut adjoints, a, grad.len());
                        for (i, g) in grad.iter().enumerate() {
                            da[i] += g / bv[i];
                        }
                    }
                    let db = acc(&mut adjoints, b, grad.len());
                    for (i, g) in grad.iter().enumerate() {
                        db[i] -= g * av[i] / (bv[i] * bv[i]);
                    }
                }
                Op::ScalarMul(x, kf) => {
                    add_into(acc(&mut adjoints, x, grad.len()), &grad, kf);
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[idx].value.data().to_vec();
                    let dx = acc(&mut adjoints, x, grad.len());
                    for (i, g) in grad.iter().enumerate() {
                        dx[i] += g * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(x).data().to_vec();
                    let dx = acc(&mut adjoints, x, grad.len());
                    for (i, g) in grad.iter().enumerate() {
                        if xv[i] > 0.0 {
                            dx[i] += g;
                        }
                    }
                }
                Op::Sin(x) => {
                    let xv = self.value(x).data().to_vec();
                    let dx = acc(&mut adjoints, x, grad.len());
                    for (i, g) in grad.iter().enumerate() {
                        dx[i] += g * xv[i].cos();
                    }
                }
                Op::Cos(x) => {
                    let xv = self.value(x).data().to_vec();
                    let dx = acc(&mut adjoints, x, grad.len());
                    for (i, g) in grad.iter().enumerate() {
                        dx[i] -= g * xv[i].sin();
                    }
                }
                Op::Softmax(x, axis) => {
                    let y = self.nodes[idx].value.data().to_vec();
                    let shape = self.nodes[idx].value.shape().to_vec();
                    let (outer, len, inner) = lanes(&shape, axis);
                    let dx = acc(&mut adjoints, x, y.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for l in 0..len {
                                let p = base + l * inner;
                                dot += grad[p] * y[p];
                            }
                            for l in 0..len {
                                let p = base + l * inner;
                                dx[p] += y[p] * (grad[p] - dot);
                            }
                        }
                    }
                }
                Op::Mean(x) => {
                    let n = self.value(x).numel();
                    let g = grad[0] / n as f64;
                    let dx = acc(&mut adjoints, x, n);
                    for d in dx.iter_mut() {
                        *d += g;
                    }
                }
                Op::Concat(xs, axis) => {
                    let shape = self.nodes[idx].value.shape().to_vec();
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let row_out = shape[axis] * inner;
                    let blocks: Vec<usize> = xs
                        .iter()
                        .map(|&x| self.value(x).shape()[axis] * inner)
                        .collect();
                    for (xi, &x) in xs.iter().enumerate() {
                        let block = blocks[xi];
                        let offset: usize = blocks[..xi].iter().sum();
                        let dx = acc(&mut adjoints, x, outer * block);
                        for o in 0..outer {
                            for t in 0..block {
                                dx[o * block + t] += grad[o * row_out + offset + t];
                            }
                        }
                    }
                }
                Op::RowScale(x, s) => {
                    let (r, c) = {
                        let sh = self.value(x).shape();
                        (sh[0], sh[1])
                    };
                    let xv = self.value(x).data().to_vec();
                    let sv = self.value(s).data().to_vec();
                    {
                        let dx = acc(&mut adjoints, x, r * c);
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] += grad[i * c + j] * sv[i];
                            }
                        }
                    }
                    let ds = acc(&mut adjoints, s, r);
                    for i in 0..r {
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += grad[i * c + j] * xv[i * c + j];
                        }
                        ds[i] += dot;
                    }
                }
                Op::RowNormalize(x) => {
                    let (r, c) = {
                        let sh = self.value(x).shape();
                        (sh[0], sh[1])
                    };
                    let xv = self.value(x).data().to_vec();
                    let y = self.nodes[idx].value.data().to_vec();
                    let dx = acc(&mut adjoints, x, r * c);
                    for i in 0..r {
                        let s: f64 = xv[i * c..(i + 1) * c].iter().sum();
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += grad[i * c + j] * y[i * c + j];
                        }
                        for j in 0..c {
                            dx[i * c + j] += (grad[i * c + j] - dot) / s;
                        }
                    }
                }
                Op::GatherRows(x, rows) => {
                    let c = self.value(x).shape()[1];
                    let n = self.value(x).numel();
                    let dx = acc(&mut adjoints, x, n);
                    for (oi, &ri) in rows.iter().enumerate() {
                        for j in 0..c {
                            dx[ri * c + j] += grad[oi * c + j];
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore_index,
                    live,
                } => {
                    let (p, k) = {
                        let s = self.value(logits).shape();
                        (s[0], s[1])
                    };
                    let xv = self.value(logits).data().to_vec();
                    let g = grad[0] / live as f64;
                    let dl = acc(&mut adjoints, logits, p * k);
                    for (pos, &t) in targets.iter().enumerate() {
                        if Some(t) == ignore_index {
                            continue;
                        }
                        let row = &xv[pos * k..(pos + 1) * k];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                        for j in 0..k {
                            let soft = (row[j] - max).exp() / sum;
                            let ind = if j == t { 1.0 } else { 0.0 };
                            dl[pos * k + j] += g * (soft - ind);
                        }
                    }
                }
            }
        }

        // Write leaf adjoints into the trainable variables that were tracked.
        for leaf in &self.leaves {
            let adj = match adjoints[leaf.node.0].take() {
                Some(a) => a,
                None => continue, // not reached from the root
            };
            if !leaf.trainable {
                continue;
            }
            let var = variables
                .iter_mut()
                .find(|v| v.name() == leaf.name)
                .ok_or_else(|| TensorError::UnboundVariable(leaf.name.clone()))?;
            var.accumulate_grad(&adj);
        }

        self.nodes.clear();
        self.leaves.clear();
        Ok(())
    }
}

fn acc<'a>(adjoints: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'a mut Vec<f64> {
    adjoints[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}
