use std::sync::Arc;

use rand::Rng;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    MinConst(Var, f64),
    RowNorms(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of primitive applications.
///
/// Nodes are stored in creation order, which is a topological order since a
/// node can only reference earlier nodes. `backward` walks the tape in exact
/// reverse. It may run once per recording; call [`Graph::zero_grad`] to run it
/// again on the same tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backpropagated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, if `v` requires grad.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backpropagated = false;
    }

    // ----- leaves -----------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf sharing storage with the caller (parameters bound without copying).
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_shared(value, Op::Leaf, requires_grad)
    }

    // ----- primitives -------------------------------------------------------

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).require2(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let da = self.dims(a, op)?;
        let db = self.dims(b, op)?;
        if da != db {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(da)
    }

    fn elementwise2(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (m, n) = self.same_shape(a, b, op_name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, data)?, op, rg))
    }

    fn map1(&mut self, x: Var, op_name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let (m, n) = self.dims(x, op_name)?;
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, n, data)?, op, rg))
    }

    /// `C = A·B` for `A: [m×k]`, `B: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    /// `X + 1·b` where `b` is a `[1×n]` row broadcast over the rows of `X`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "add_row")?;
        if self.dims(b, "add_row")? != (1, n) {
            return Err(Error::dim("add_row", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(v, c)| v + c))
            .collect();
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddRow(x, b), rg))
    }

    /// `X + s` for a `[1×1]` scalar variable `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "add_scalar")?;
        if self.value(s).len() != 1 {
            return Err(Error::dim("add_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let data = self.value(x).data().iter().map(|v| v + c).collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddScalar(x, s), rg))
    }

    /// Scales row `i` of `X: [m×n]` by `c[i]`, `c: [m×1]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "mul_col")?;
        if self.dims(c, "mul_col")? != (m, 1) {
            return Err(Error::dim("mul_col", self.shape(x), self.shape(c)));
        }
        let col = self.value(c).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .zip(col)
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        let rg = self.rg(&[x, c]);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MulCol(x, c), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map1(x, "scale", Op::Scale(x, c), |v| v * c)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map1(x, "offset", Op::Offset(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map1(x, "relu", Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map1(x, "sigmoid", Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map1(x, "abs", Op::Abs(x), f64::abs)
    }

    /// Elementwise `min(x, c)`. At the tie `x == c` the gradient follows `x`.
    pub fn min_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map1(x, "min_const", Op::MinConst(x, c), |v| v.min(c))
    }

    /// Euclidean norm of every row: `[m×n] -> [m×1]`.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "row_norms")?;
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, 1, data)?, Op::RowNorms(x), rg))
    }

    /// L2 norm of a row vector, as a `[1×1]` scalar.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let (m, _) = self.dims(x, "l2_norm")?;
        if m != 1 {
            return Err(Error::Contract(format!(
                "l2_norm expects a row vector, got {:?}",
                self.shape(x)
            )));
        }
        self.row_norms(x)
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x, "layer_norm")?;
        if self.dims(gain, "layer_norm")? != (1, n) {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        if self.dims(bias, "layer_norm")? != (1, n) {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(bias)));
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::matrix(m, n, out)?, op, rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "softmax_rows")?;
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut total = 0.0;
            for v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::SoftmaxRows(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols needs at least one input".into()));
        };
        let (m, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{end} out of range for {:?}",
                self.shape(x)
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for row in self.value(x).data().chunks(n) {
            out.extend_from_slice(&row[start..end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, w, out)?, Op::SliceCols(x, start), rg))
    }

    /// Rows of `table` selected by `indices` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table, "gather_rows")?;
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::Contract(format!(
                    "gather_rows index {i} out of range for {m} rows"
                )));
            }
            out.extend_from_slice(self.value(table).row_slice(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::matrix(indices.len(), n, out)?,
            Op::GatherRows(table, indices.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Inverted dropout: zeroes entries with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout p must be in [0, 1), got {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let (m, n) = self.dims(x, "dropout")?;
        let keep = 1.0 / (1.0 - p);
        let mask = (0..m * n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = self.constant(Tensor::matrix(m, n, mask)?);
        self.mul(x, mask)
    }

    // ----- analysis ---------------------------------------------------------

    /// Smallest distance of any recorded kink argument (ReLU and abs at 0,
    /// `min_const` at its threshold) from its kink, over nodes on a gradient
    /// path. Finite-difference checks are only trustworthy when this is well
    /// above the probe step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if !node.requires_grad {
                continue;
            }
            let (x, at) = match node.op {
                Op::Relu(x) | Op::Abs(x) => (x, 0.0),
                Op::MinConst(x, c) => (x, c),
                _ => continue,
            };
            for v in self.value(x).data() {
                margin = margin.min((v - at).abs());
            }
        }
        margin
    }

    // ----- reverse pass -----------------------------------------------------

    /// Populates gradients of every `requires_grad` node with respect to the
    /// scalar `loss`. Errors if `loss` is not a single element or if backward
    /// already ran on this recording.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(Error::Contract(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.backpropagated = true;
        if !self.nodes[loss.0].requires_grad {
            self.fill_leaf_grads();
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![1.0])?);

        for id in (0..=loss.0).rev() {
            let Some(grad) = self.grads[id].take() else {
                continue;
            };
            if self.nodes[id].requires_grad {
                self.propagate(id, &grad);
            }
            self.grads[id] = Some(grad);
        }
        self.fill_leaf_grads();
        Ok(())
    }

    fn fill_leaf_grads(&mut self) {
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[id].is_none() {
                let (r, c) = node.value.dims2().unwrap_or((1, node.value.len()));
                let zeros = Tensor::new(node.value.shape().to_vec(), vec![0.0; r * c])
                    .expect("leaf shape is valid");
                self.grads[id] = Some(zeros);
            }
        }
    }

    /// Adds `f`'s contribution into the gradient buffer of `target`.
    fn acc(&mut self, target: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[target.0];
        if slot.is_none() {
            let v = &self.nodes[target.0].value;
            *slot = Some(Tensor::new(v.shape().to_vec(), vec![0.0; v.len()]).expect("valid shape"));
        }
        f(slot.as_mut().expect("initialized").data_mut());
    }

    fn val(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    fn propagate(&mut self, id: usize, grad: &Tensor) {
        let dy = grad.data();
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                let (m, k) = va.dims2().expect("rank 2");
                let n = vb.cols();
                self.acc(a, |g| kernels::matmul_bt_acc(dy, vb.data(), g, m, n, k));
                self.acc(b, |g| kernels::matmul_at_acc(va.data(), dy, g, m, k, n));
            }
            Op::Add(a, b) => {
                self.acc(a, |g| add_into(g, dy));
                self.acc(b, |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                self.acc(a, |g| add_into(g, dy));
                self.acc(b, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                self.acc(a, |g| {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(vb.data()) {
                        *g += d * y;
                    }
                });
                self.acc(b, |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(va.data()) {
                        *g += d * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                self.acc(a, |g| {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(vb.data()) {
                        *g += d / y;
                    }
                });
                self.acc(b, |g| {
                    for (((g, d), x), y) in g.iter_mut().zip(dy).zip(va.data()).zip(vb.data()) {
                        *g -= d * x / (y * y);
                    }
                });
            }
            Op::AddRow(x, b) => {
                let n = self.value(b).len();
                self.acc(x, |g| add_into(g, dy));
                self.acc(b, |g| {
                    for row in dy.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::AddScalar(x, s) => {
                self.acc(x, |g| add_into(g, dy));
                self.acc(s, |g| g[0] += dy.iter().sum::<f64>());
            }
            Op::MulCol(x, c) => {
                let (vx, vc) = (self.val(x), self.val(c));
                let n = vx.cols();
                self.acc(x, |g| {
                    for ((grow, drow), s) in g.chunks_mut(n).zip(dy.chunks(n)).zip(vc.data()) {
                        for (g, d) in grow.iter_mut().zip(drow) {
                            *g += d * s;
                        }
                    }
                });
                self.acc(c, |g| {
                    for ((gc, drow), xrow) in g.iter_mut().zip(dy.chunks(n)).zip(vx.data().chunks(n)) {
                        *gc += drow.iter().zip(xrow).map(|(d, x)| d * x).sum::<f64>();
                    }
                });
            }
            Op::Scale(x, c) => self.acc(x, |g| {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d);
            }),
            Op::Offset(x) => self.acc(x, |g| add_into(g, dy)),
            Op::Relu(x) => {
                let vx = self.val(x);
                self.acc(x, |g| {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(vx.data()) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.val(Var(id));
                self.acc(x, |g| {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(y.data()) {
                        *g += d * y * (1.0 - y);
                    }
                });
            }
            Op::Abs(x) => {
                let vx = self.val(x);
                self.acc(x, |g| {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(vx.data()) {
                        if *v > 0.0 {
                            *g += d;
                        } else if *v < 0.0 {
                            *g -= d;
                        }
                    }
                });
            }
            Op::MinConst(x, c) => {
                let vx = self.val(x);
                self.acc(x, |g| {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(vx.data()) {
                        if *v <= c {
                            *g += d;
                        }
                    }
                });
            }
            Op::RowNorms(x) => {
                let vx = self.val(x);
                let norms = self.val(Var(id));
                let n = vx.cols();
                self.acc(x, |g| {
                    for (((grow, xrow), nrm), d) in g
                        .chunks_mut(n)
                        .zip(vx.data().chunks(n))
                        .zip(norms.data())
                        .zip(dy)
                    {
                        if *nrm > 0.0 {
                            for (g, v) in grow.iter_mut().zip(xrow) {
                                *g += d * v / nrm;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let vg = self.val(gain);
                let n = vg.len();
                self.acc(gain, |g| {
                    for (drow, hrow) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for ((g, d), h) in g.iter_mut().zip(drow).zip(hrow) {
                            *g += d * h;
                        }
                    }
                });
                self.acc(bias, |g| {
                    for drow in dy.chunks(n) {
                        add_into(g, drow);
                    }
                });
                self.acc(x, |g| {
                    let mut dh = vec![0.0; n];
                    for (((grow, drow), hrow), inv) in g
                        .chunks_mut(n)
                        .zip(dy.chunks(n))
                        .zip(xhat.chunks(n))
                        .zip(&inv_std)
                    {
                        for ((t, d), w) in dh.iter_mut().zip(drow).zip(vg.data()) {
                            *t = d * w;
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((g, t), h) in grow.iter_mut().zip(&dh).zip(hrow) {
                            *g += inv * (t - mean_dh - h * mean_dh_h);
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = self.val(Var(id));
                let n = y.cols();
                self.acc(x, |g| {
                    for ((grow, drow), yrow) in g.chunks_mut(n).zip(dy.chunks(n)).zip(y.data().chunks(n)) {
                        let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for ((g, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                            *g += y * (d - dot);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = grad.dims2().expect("rank 2");
                self.acc(x, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[j * m + i] += dy[i * n + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = grad.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(p).cols();
                    self.acc(p, |g| {
                        for (grow, drow) in g.chunks_mut(w).zip(dy.chunks(total)) {
                            add_into(grow, &drow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let n = self.value(x).cols();
                let w = grad.cols();
                self.acc(x, |g| {
                    for (grow, drow) in g.chunks_mut(n).zip(dy.chunks(w)) {
                        add_into(&mut grow[start..start + w], drow);
                    }
                });
            }
            Op::GatherRows(table, indices) => {
                let n = self.value(table).cols();
                self.acc(table, |g| {
                    for (&i, drow) in indices.iter().zip(dy.chunks(n)) {
                        add_into(&mut g[i * n..(i + 1) * n], drow);
                    }
                });
            }
            Op::Sum(x) => {
                let d = dy[0];
                self.acc(x, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::Mean(x) => {
                let d = dy[0] / self.value(x).len() as f64;
                self.acc(x, |g| g.iter_mut().for_each(|g| *g += d));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
