//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! Every operation on a [`Graph`] evaluates eagerly, appends a node holding
//! its output value, and remembers what its backward rule needs. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use attn_disagree::autodiff::Graph;
//! use attn_disagree::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(&Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
//! let y = g.square(x).unwrap();
//! let loss = g.sum(y).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
//! ```
//!
//! A graph is confined to one thread. Independent graphs may live on
//! different threads.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    NormalizeRows { x: Var, denom: Vec<f64>, clamped: Vec<bool> },
    GatherRows { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::LayerNorm { .. } => "layer_norm",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Test-only corruption of a backward rule, used to prove the gradient
/// checker catches broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardFault {
    /// Multiply the table gradient of every row gather by this factor.
    ScaleGather(f64),
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
    fault: Option<BackwardFault>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` does not require grad or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get_or_zeros(&self, v: Var, graph: &Graph) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; graph.value(v).numel()],
        }
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

// out[m×k] += g[m×n] · bᵀ where b is k×n
fn acc_g_bt(out: &mut [f64], g: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[k×n] += aᵀ · g where a is m×k, g is m×n
fn acc_at_g(out: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that evaluates values only. Nothing requires grad and
    /// backward rules are not retained.
    pub fn no_grad() -> Self {
        Graph {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn set_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First element of `v`, for scalars.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Handle of the node at position `i`, for walking the tape.
    pub fn var_at(&self, i: usize) -> Var {
        assert!(i < self.nodes.len(), "node {i} out of range");
        Var(i)
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Leaf honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad() && !self.no_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf (copies `t`).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let rg = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(Error::contract(format!(
                "{op} expects a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, op, &[a])
    }

    fn zip_binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let c = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], c)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map_unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map_unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::NonFinite { op: "sqrt" });
        }
        self.map_unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of zero tensors"))?;
        let (m, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.matrix_dims(p, "concat_cols")?;
            if mp != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: vec![mp, np],
                });
            }
            widths.push(np);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Tensor::new(vec![m, n], data)?, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if width == 0 || start + width > n {
            return Err(Error::contract(format!(
                "slice_cols {start}..{} out of range for width {n}",
                start + width
            )));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + width]);
        }
        self.push(Tensor::new(vec![m, width], data)?, Op::SliceCols { x, start }, &[x])
    }

    /// Splits an `m × (h·w)` matrix into `h` blocks of `w` columns.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Vec<Var>> {
        let (_, n) = self.matrix_dims(x, "split_heads")?;
        if heads == 0 || n % heads != 0 {
            return Err(Error::contract(format!(
                "cannot split width {n} into {heads} heads"
            )));
        }
        let w = n / heads;
        (0..heads).map(|h| self.slice_cols(x, h * w, w)).collect()
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "transpose")?;
        let t = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], data)?, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(shape.to_vec(), t.data().to_vec()).map_err(|_| Error::Shape {
            op: "reshape",
            lhs: t.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "softmax_rows")?;
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..(i + 1) * n];
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
        self.push(Tensor::new(vec![m, n], data)?, Op::SoftmaxRows(x), &[x])
    }

    /// `x[i, j] + bias[j]`; `bias` holds one value per column.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_row")?;
        if self.value(bias).numel() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: vec![m, n],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(x, bias), &[x, bias])
    }

    /// `x[i, j] * gain[j]`.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "mul_row")?;
        if self.value(gain).numel() != n {
            return Err(Error::Shape {
                op: "mul_row",
                lhs: vec![m, n],
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let s = self.value(gain).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(s).map(|(x, y)| x * y))
            .collect();
        self.push(Tensor::new(vec![m, n], data)?, Op::MulRow(x, gain), &[x, gain])
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "layer_norm")?;
        let t = self.value(x);
        let mut data = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = t.row(i);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mu) * r;
            }
            inv_std.push(r);
        }
        self.push(Tensor::new(vec![m, n], data)?, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Scales each row to unit length, dividing by `max(‖row‖, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "normalize_rows")?;
        let t = self.value(x);
        let mut data = vec![0.0; m * n];
        let mut denom = Vec::with_capacity(m);
        let mut clamped = Vec::with_capacity(m);
        for i in 0..m {
            let row = t.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = norm.max(eps);
            for (o, v) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v / d;
            }
            denom.push(d);
            clamped.push(norm < eps);
        }
        self.push(
            Tensor::new(vec![m, n], data)?,
            Op::NormalizeRows { x, denom, clamped },
            &[x],
        )
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.matrix_dims(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::contract(format!(
                    "row index {id} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        self.push(
            Tensor::new(vec![ids.len(), n], data)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Mean negative log-likelihood of `targets[i]` under `softmax(logits[i])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![m, n],
                rhs: vec![targets.len()],
            });
        }
        let t = self.value(logits);
        let mut probs = vec![0.0; m * n];
        let mut nll = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            if y >= n {
                return Err(Error::contract(format!(
                    "target {y} out of range for {n} classes"
                )));
            }
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            nll -= row[y] - log_z;
            for (p, v) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        self.push(
            Tensor::scalar(nll / m as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Propagates d(loss)/d(node) to every node that requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| acc_g_bt(d, g, bd, m, k, n));
                acc(*b, &mut |d| acc_at_g(d, ad, g, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(o, gv)| *o -= gv));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| zip3(d, g, bd, |gv, bv| gv * bv));
                acc(*b, &mut |d| zip3(d, g, ad, |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| zip3(d, g, bd, |gv, bv| gv / bv));
                acc(*b, &mut |d| {
                    for ((o, gv), (av, bv)) in d.iter_mut().zip(g).zip(ad.iter().zip(bd)) {
                        *o -= gv * av / (bv * bv);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| zip3(d, g, g, |gv, _| c * gv)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Square(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |d| zip3(d, g, ad, |gv, av| 2.0 * av * gv));
            }
            Op::Sqrt(a) => acc(*a, &mut |d| zip3(d, g, y, |gv, yv| gv / (2.0 * yv))),
            Op::Relu(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |d| {
                    zip3(d, g, ad, |gv, av| if av > 0.0 { gv } else { 0.0 })
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let n = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).shape()[1];
                    acc(*p, &mut |d| {
                        for i in 0..m {
                            add_into(&mut d[i * w..(i + 1) * w], &g[i * n + offset..i * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, w) = (node.value.shape()[0], node.value.shape()[1]);
                let n = val(*x).shape()[1];
                acc(*x, &mut |d| {
                    for i in 0..m {
                        add_into(&mut d[i * n + start..i * n + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                acc(*x, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.shape()[1];
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let n = node.value.shape()[1];
                acc(*x, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    for grow in g.chunks(n) {
                        add_into(d, grow);
                    }
                });
            }
            Op::MulRow(x, gain) => {
                let n = node.value.shape()[1];
                let (xd, sd) = (val(*x).data(), val(*gain).data());
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(n)) {
                        for ((o, gv), sv) in drow.iter_mut().zip(grow).zip(sd) {
                            *o += gv * sv;
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (grow, xrow) in g.chunks(n).zip(xd.chunks(n)) {
                        for ((o, gv), xv) in d.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xv;
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let n = node.value.shape()[1];
                let nf = n as f64;
                acc(*x, &mut |d| {
                    for (i, ((drow, grow), yrow)) in
                        d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).enumerate()
                    {
                        let gm = grow.iter().sum::<f64>() / nf;
                        let gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for ((o, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += inv_std[i] * (gv - gm - yv * gy);
                        }
                    }
                });
            }
            Op::NormalizeRows { x, denom, clamped } => {
                let n = node.value.shape()[1];
                acc(*x, &mut |d| {
                    for (i, ((drow, grow), yrow)) in
                        d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).enumerate()
                    {
                        let dot = if clamped[i] {
                            0.0
                        } else {
                            grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>()
                        };
                        for ((o, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += (gv - yv * dot) / denom[i];
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let n = node.value.shape()[1];
                let factor = match self.fault {
                    Some(BackwardFault::ScaleGather(s)) => s,
                    None => 1.0,
                };
                acc(*table, &mut |d| {
                    for (&id, grow) in ids.iter().zip(g.chunks(n)) {
                        for (o, gv) in d[id * n..(id + 1) * n].iter_mut().zip(grow) {
                            *o += factor * gv;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = val(*logits).shape()[1];
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |d| {
                    for (i, &t) in targets.iter().enumerate() {
                        let drow = &mut d[i * n..(i + 1) * n];
                        for (o, p) in drow.iter_mut().zip(&probs[i * n..(i + 1) * n]) {
                            *o += scale * p;
                        }
                        drow[t] -= scale;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn zip3(dst: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((o, &gv), &ov) in dst.iter_mut().zip(g).zip(other) {
        *o += f(gv, ov);
    }
}
