//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward is a single reverse sweep.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::math::tensor::gemm;
use crate::math::{ParamId, ParamStore, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddRow,
    Sub,
    Scale,
    Relu,
    Tanh,
    Concat,
    Slice,
    Mean,
    Sum,
    Mse,
    SoftmaxCrossEntropy,
    L2Norm,
    Gather,
    StraightThrough,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Scale(usize, f32),
    Relu(usize),
    Tanh(usize),
    Concat(Vec<usize>),
    Slice { src: usize, start: usize },
    Mean(usize),
    Sum(usize),
    Mse(usize, usize),
    SoftmaxCe { logits: usize, targets: Vec<usize>, probs: Vec<f32> },
    L2Norm(usize),
    Gather { table: usize, idx: Vec<usize> },
    StraightThrough(usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Mean(_) => OpKind::Mean,
            Op::Sum(_) => OpKind::Sum,
            Op::Mse(..) => OpKind::Mse,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCrossEntropy,
            Op::L2Norm(_) => OpKind::L2Norm,
            Op::Gather { .. } => OpKind::Gather,
            Op::StraightThrough(_) => OpKind::StraightThrough,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    param: Option<ParamId>,
    // f64 value of scalar reductions, kept for precise finite differences
    precise: Option<f64>,
    // f64 re-evaluation of the whole node, only in shadow mode
    shadow: Option<Vec<f64>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient for a non-parameter leaf created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.leaves.is_empty()
    }

    /// Euclidean norm over all parameter gradients.
    pub fn global_norm(&self) -> f32 {
        self.params
            .values()
            .flat_map(|t| t.data().iter())
            .map(|g| (*g as f64) * (*g as f64))
            .sum::<f64>()
            .sqrt() as f32
    }
}

/// Single-use computation graph. Build it with the op methods, then call
/// [`Graph::backward`] once; the recorded intermediates are released
/// afterwards.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    shadow: bool,
    // (param, flat index, offset) applied to the f64 shadow of that param
    nudge: Option<(ParamId, usize, f64)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that additionally evaluates every node in f64. Used by the
    /// finite-difference oracle so that rounding noise does not swamp small
    /// gradient entries.
    pub fn with_f64_shadow() -> Self {
        Self {
            shadow: true,
            ..Self::default()
        }
    }

    /// In shadow mode, offsets entry `index` of parameter `id` by `delta` in
    /// the f64 evaluation only.
    pub(crate) fn nudge_param(&mut self, id: ParamId, index: usize, delta: f64) {
        self.nudge = Some((id, index, delta));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, label: &str) -> Result<Var> {
        if self.consumed {
            return Err(Error::State("graph already consumed by backward".into()));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(label.to_string()));
        }
        let shadow = if self.shadow {
            let sh = self.shadow_of(&op, &value);
            if sh.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(label.to_string()));
            }
            Some(sh)
        } else {
            None
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            param: None,
            precise: None,
            shadow,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// f64 evaluation of `op` from the shadows of its inputs.
    fn shadow_of(&self, op: &Op, value: &Tensor) -> Vec<f64> {
        let sh = |j: &usize| self.nodes[*j].shadow.as_deref().expect("shadow mode");
        let shape = |j: &usize| self.nodes[*j].value.shape();
        let zip = |a: &usize, b: &usize, f: fn(f64, f64) -> f64| -> Vec<f64> {
            sh(a).iter().zip(sh(b)).map(|(&x, &y)| f(x, y)).collect()
        };
        match op {
            Op::Leaf | Op::StraightThrough(_) => value.data().iter().map(|&x| x as f64).collect(),
            Op::MatMul(a, b) => {
                let (m, k, n) = (shape(a)[0], shape(a)[1], shape(b)[1]);
                let (x, y) = (sh(a), sh(b));
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let xv = x[i * k + p];
                        for j in 0..n {
                            out[i * n + j] += xv * y[p * n + j];
                        }
                    }
                }
                out
            }
            Op::Add(a, b) => zip(a, b, |x, y| x + y),
            Op::Sub(a, b) => zip(a, b, |x, y| x - y),
            Op::AddRow(a, r) => {
                let row = sh(r);
                let c = row.len();
                sh(a).iter().enumerate().map(|(i, &x)| x + row[i % c]).collect()
            }
            Op::Scale(a, s) => sh(a).iter().map(|&x| x * *s as f64).collect(),
            Op::Relu(a) => sh(a).iter().map(|&x| x.max(0.0)).collect(),
            Op::Tanh(a) => sh(a).iter().map(|&x| x.tanh()).collect(),
            Op::Concat(parts) => {
                let rows = value.rows();
                let mut out = Vec::with_capacity(value.numel());
                for r in 0..rows {
                    for p in parts {
                        let w = shape(p)[1];
                        out.extend_from_slice(&sh(p)[r * w..(r + 1) * w]);
                    }
                }
                out
            }
            Op::Slice { src, start } => {
                let full = shape(src)[1];
                let w = value.cols();
                (0..value.rows())
                    .flat_map(|r| sh(src)[r * full + start..r * full + start + w].to_vec())
                    .collect()
            }
            Op::Sum(a) => vec![sh(a).iter().sum()],
            Op::Mean(a) => vec![sh(a).iter().sum::<f64>() / sh(a).len() as f64],
            Op::Mse(a, b) => {
                let s: f64 = sh(a).iter().zip(sh(b)).map(|(x, y)| (x - y) * (x - y)).sum();
                vec![s / sh(a).len() as f64]
            }
            Op::SoftmaxCe { logits, targets, .. } => {
                let c = shape(logits)[1];
                let x = sh(logits);
                let total: f64 = targets
                    .iter()
                    .enumerate()
                    .map(|(r, &t)| {
                        let row = &x[r * c..(r + 1) * c];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        z.ln() - (row[t] - mx)
                    })
                    .sum();
                vec![total / targets.len() as f64]
            }
            Op::L2Norm(a) => vec![sh(a).iter().map(|x| x * x).sum::<f64>().sqrt()],
            Op::Gather { table, idx } => {
                let c = shape(table)[1];
                idx.iter().flat_map(|&r| sh(table)[r * c..(r + 1) * c].to_vec()).collect()
            }
        }
    }

    fn push_scalar(&mut self, op: Op, value: f64, needs_grad: bool, label: &str) -> Result<Var> {
        let v = self.push(op, Tensor::scalar(value as f32), needs_grad, label)?;
        self.nodes[v.0].precise = Some(value);
        Ok(v)
    }

    fn precise_of(&self, v: Var) -> Option<f64> {
        let n = &self.nodes[v.0];
        match n.precise {
            Some(p) => Some(p),
            None if n.value.numel() == 1 => Some(n.value.item() as f64),
            None => None,
        }
    }

    /// Scalar value with extra precision where the producing op kept it.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        if let Some(sh) = &self.nodes[v.0].shadow {
            return sh[0];
        }
        self.precise_of(v)
            .unwrap_or_else(|| self.nodes[v.0].value.item() as f64)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Leaf, t, false, "input")
    }

    /// Leaf that optionally receives a gradient, reported via [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(Op::Leaf, t, requires_grad, "leaf")
    }

    /// Leaf whose f64 shadow is `exact` rather than the rounded `t`.
    pub(crate) fn leaf_with_shadow(&mut self, t: Tensor, exact: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let v = self.push(Op::Leaf, t, requires_grad, "leaf")?;
        if self.shadow {
            self.nodes[v.0].shadow = Some(exact);
        }
        Ok(v)
    }

    fn param_leaf(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Result<Var> {
        let v = self.push(Op::Leaf, store.get(id).clone(), trainable, store.name(id))?;
        if let (Some((nid, i, d)), Some(sh)) = (self.nudge, self.nodes[v.0].shadow.as_mut()) {
            if nid == id {
                sh[i] += d;
            }
        }
        Ok(v)
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let v = self.param_leaf(store, id, true)?;
        self.nodes[v.0].param = Some(id);
        Ok(v)
    }

    /// Parameter leaf that is read but never differentiated.
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.param_leaf(store, id, false)
    }

    /// Copy of `a` that blocks gradients (stop-gradient). Its f64 shadow is
    /// the plain value, so finite differences also treat it as a constant.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a).clone();
        self.push(Op::Leaf, t, false, "detach")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a.0, b.0), Tensor::new(vec![m, n], out)?, ng, "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        if t.shape() == [1] {
            if let (Some(x), Some(y)) = (self.precise_of(a), self.precise_of(b)) {
                return self.push_scalar(Op::Add(a.0, b.0), x + y, ng, "add");
            }
        }
        self.push(Op::Add(a.0, b.0), t, ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        if t.shape() == [1] {
            if let (Some(x), Some(y)) = (self.precise_of(a), self.precise_of(b)) {
                return self.push_scalar(Op::Sub(a.0, b.0), x - y, ng, "sub");
            }
        }
        self.push(Op::Sub(a.0, b.0), t, ng, "sub")
    }

    /// Adds a row vector (`[c]` or `[1, c]`) to every row of a `[n, c]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.val(a), self.val(row));
        let c = ta.cols();
        if ta.rank() != 2 || tr.numel() != c {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", ta.shape(), tr.shape()),
            ));
        }
        let r = tr.data();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(row);
        self.push(Op::AddRow(a.0, row.0), t, ng, "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let ta = self.val(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a);
        if t.shape() == [1] {
            if let Some(x) = self.precise_of(a) {
                return self.push_scalar(Op::Scale(a.0, s), x * s as f64, ng, "scale");
            }
        }
        self.push(Op::Scale(a.0, s), t, ng, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a);
        self.push(Op::Relu(a.0), t, ng, "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let data = ta.data().iter().map(|&x| x.tanh()).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a);
        self.push(Op::Tanh(a.0), t, ng, "tanh")
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let rows = self.val(parts[0]).rows();
        for &p in parts {
            let t = self.val(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(Error::shape(
                    "concat",
                    format!("expected [{rows}, _], got {:?}", t.shape()),
                ));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.val(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.val(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let t = Tensor::new(vec![rows, total], data)?;
        self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), t, ng, "concat")
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.val(a);
        if ta.rank() != 2 || start >= end || end > ta.cols() {
            return Err(Error::shape(
                "slice",
                format!("columns {start}..{end} of {:?}", ta.shape()),
            ));
        }
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&ta.row(r)[start..end]);
        }
        let t = Tensor::new(vec![rows, end - start], data)?;
        let ng = self.ng(a);
        self.push(Op::Slice { src: a.0, start }, t, ng, "slice")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.val(a).data().iter().map(|&x| x as f64).sum();
        let ng = self.ng(a);
        self.push_scalar(Op::Sum(a.0), s, ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let s: f64 = ta.data().iter().map(|&x| x as f64).sum();
        let m = s / ta.numel() as f64;
        let ng = self.ng(a);
        self.push_scalar(Op::Mean(a.0), m, ng, "mean")
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        let m = s / ta.numel() as f64;
        let ng = self.ng(a) || self.ng(b);
        self.push_scalar(Op::Mse(a.0, b.0), m, ng, "mse")
    }

    /// Row-wise softmax cross-entropy against class indices, averaged over rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.val(logits);
        let (n, c) = (tl.rows(), tl.cols());
        if tl.rank() != 2 || targets.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} with {} targets", tl.shape(), targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("target {bad} out of range for {c} classes"),
            ));
        }
        let mut probs = vec![0.0f32; n * c];
        let mut loss = 0.0f64;
        for r in 0..n {
            let row = tl.row(r);
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for (j, &x) in row.iter().enumerate() {
                let e = ((x - mx) as f64).exp();
                probs[r * c + j] = e as f32;
                z += e;
            }
            for j in 0..c {
                probs[r * c + j] = (probs[r * c + j] as f64 / z) as f32;
            }
            loss += z.ln() - (row[targets[r]] - mx) as f64;
        }
        let ng = self.ng(logits);
        self.push_scalar(
            Op::SoftmaxCe {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            loss / n as f64,
            ng,
            "softmax_cross_entropy",
        )
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self
            .val(a)
            .data()
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum();
        let ng = self.ng(a);
        self.push_scalar(Op::L2Norm(a.0), s.sqrt(), ng, "l2_norm")
    }

    /// Row lookup into a `[rows, c]` table (embedding).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.val(table);
        if tt.rank() != 2 || idx.is_empty() {
            return Err(Error::shape("gather", format!("table {:?}", tt.shape())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= tt.rows()) {
            return Err(Error::shape(
                "gather",
                format!("row {bad} out of range for table {:?}", tt.shape()),
            ));
        }
        let t = tt.gather_rows(idx);
        let ng = self.ng(table);
        self.push(
            Op::Gather {
                table: table.0,
                idx: idx.to_vec(),
            },
            t,
            ng,
            "gather",
        )
    }

    /// Emits `value` on the forward pass while routing the incoming gradient
    /// unchanged to `a` (identity Jacobian).
    pub fn straight_through(&mut self, a: Var, value: Tensor) -> Result<Var> {
        if value.shape() != self.val(a).shape() {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", self.val(a).shape(), value.shape()),
            ));
        }
        let ng = self.ng(a);
        self.push(Op::StraightThrough(a.0), value, ng, "straight_through")
    }

    /// Reverse sweep from a scalar output. Consumes the recorded
    /// intermediates; the graph cannot be reused afterwards.
    pub fn backward(&mut self, out: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if out.0 >= self.nodes.len() {
            return Err(Error::State("backward called before forward".into()));
        }
        if self.nodes[out.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.nodes[out.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut result = Gradients::default();
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = g else { continue };
            let t = Tensor::new(node.value.shape().to_vec(), g)?;
            if !t.is_finite() {
                return Err(Error::NonFinite("backward".into()));
            }
            match node.param {
                Some(pid) => match result.params.get_mut(&pid) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        result.params.insert(pid, t);
                    }
                },
                None => {
                    result.leaves.insert(Var(i), t);
                }
            }
        }
        self.consumed = true;
        self.nodes.clear();
        self.nodes.shrink_to_fit();
        Ok(result)
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let acc = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, tb.data(), true, acc, 1.0);
                }
                if wants(*b) {
                    let acc = slot(grads, *b, k * n);
                    gemm(k, m, n, ta.data(), true, g, false, acc, 1.0);
                }
            }
            Op::Add(a, b) => {
                for &j in [a, b] {
                    if wants(j) {
                        axpy(slot(grads, j, g.len()), g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
                if wants(*b) {
                    axpy(slot(grads, *b, g.len()), g, -1.0);
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
                if wants(*row) {
                    let c = nodes[*row].value.numel();
                    let acc = slot(grads, *row, c);
                    for chunk in g.chunks(c) {
                        for (x, y) in acc.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), g, *s);
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = nodes[*a].value.data();
                    let acc = slot(grads, *a, g.len());
                    for ((d, &gi), &xi) in acc.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let y = node.value.data();
                    let acc = slot(grads, *a, g.len());
                    for ((d, &gi), &yi) in acc.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    if wants(p) {
                        let acc = slot(grads, p, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (x, y) in acc[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { src, start } => {
                if wants(*src) {
                    let full = nodes[*src].value.cols();
                    let rows = node.value.rows();
                    let w = node.value.cols();
                    let acc = slot(grads, *src, rows * full);
                    for r in 0..rows {
                        let dst = &mut acc[r * full + start..r * full + start + w];
                        for (x, y) in dst.iter_mut().zip(&g[r * w..(r + 1) * w]) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let n = nodes[*a].value.numel();
                    for x in slot(grads, *a, n).iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = nodes[*a].value.numel();
                    let s = g[0] / n as f32;
                    for x in slot(grads, *a, n).iter_mut() {
                        *x += s;
                    }
                }
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let n = ta.numel();
                let s = 2.0 * g[0] / n as f32;
                if wants(*a) {
                    let acc = slot(grads, *a, n);
                    for ((d, x), y) in acc.iter_mut().zip(ta.data()).zip(tb.data()) {
                        *d += s * (x - y);
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, n);
                    for ((d, x), y) in acc.iter_mut().zip(ta.data()).zip(tb.data()) {
                        *d -= s * (x - y);
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                if wants(*logits) {
                    let n = targets.len();
                    let c = probs.len() / n;
                    let s = g[0] / n as f32;
                    let acc = slot(grads, *logits, n * c);
                    for r in 0..n {
                        for j in 0..c {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            acc[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::L2Norm(a) => {
                if wants(*a) {
                    let norm = node.value.item();
                    let x = nodes[*a].value.data();
                    let acc = slot(grads, *a, x.len());
                    if norm > 0.0 {
                        for (d, xi) in acc.iter_mut().zip(x) {
                            *d += g[0] * xi / norm;
                        }
                    }
                }
            }
            Op::Gather { table, idx } => {
                if wants(*table) {
                    let tt = &nodes[*table].value;
                    let c = tt.cols();
                    let acc = slot(grads, *table, tt.numel());
                    for (r, &row) in idx.iter().enumerate() {
                        for (x, y) in acc[row * c..(row + 1) * c]
                            .iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                        {
                            *x += y;
                        }
                    }
                }
            }
            Op::StraightThrough(a) => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
            }
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], j: usize, n: usize) -> &mut [f32] {
    grads[j].get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
}

fn axpy(acc: &mut [f32], g: &[f32], s: f32) {
    for (x, y) in acc.iter_mut().zip(g) {
        *x += s * y;
    }
}
