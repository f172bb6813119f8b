use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

use super::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds exposed through [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Powf(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    SumAll(Var),
    Expand(Var),
    SumRows(Var),
    BroadcastRows(Var),
    SumCols(Var),
    BroadcastCols(Var),
    SliceCols(Var, usize),
    PadCols(Var, usize),
    SliceRows(Var, usize),
    PadRows(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Index(Var, usize),
    Scatter(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Nodes are appended in construction order, so every
/// node's inputs precede it and reverse insertion order is a valid
/// reverse topological order.
///
/// All nodes are rank-2; scalars are 1×1. Gradient rules are themselves
/// recorded as graph operations, which makes gradients differentiable
/// (`grad(.., create_graph = true)`).
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- leaves ---------------------------------------------------------

    /// Binds a tensor as a leaf; gradients flow to it iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.matrix_dims();
        self.push(r, c, t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Leaf that requires grad regardless of the tensor's flag.
    pub fn param(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() {
            return Err(shape_err("param", &[rows, cols], &[values.len()]));
        }
        Ok(self.push(rows, cols, values, Op::Leaf, true))
    }

    pub fn constant(&mut self, m: &Matrix) -> Var {
        self.push(m.rows(), m.cols(), m.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_values(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() {
            return Err(shape_err("constant", &[rows, cols], &[values.len()]));
        }
        Ok(self.push(rows, cols, values, Op::Leaf, false))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(1, 1, vec![v], Op::Leaf, false)
    }

    fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf, false)
    }

    /// Copy of `v`'s value as a constant leaf (cuts the gradient path).
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (r, c, val) = (n.rows, n.cols, n.value.clone());
        self.push(r, c, val, Op::Leaf, false)
    }

    // ---- inspection -----------------------------------------------------

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn to_matrix(&self, v: Var) -> Matrix {
        let n = self.node(v);
        Matrix::from_vec(n.rows, n.cols, n.value.clone()).expect("node dims consistent")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "expected a scalar, got {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.value[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| Error::InvalidArgument("binary elementwise op needs a second operand".into()))
        };
        match op {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Scale(c) => Ok(self.scale(a, c)),
            ElementwiseOp::Relu => Ok(self.relu(a)),
            ElementwiseOp::Sigmoid => Ok(self.sigmoid(a)),
        }
    }

    /// Aligns `b` with `a`: exact shape match, or `b` is a scalar and gets expanded.
    fn align(&mut self, op: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if (ar, ac) == (br, bc) {
            Ok(b)
        } else if br * bc == 1 {
            self.expand(b, ar, ac)
        } else {
            Err(shape_err(op, &[ar, ac], &[br, bc]))
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(Var, Var) -> Op) -> Result<Var> {
        let b = self.align(op, a, b)?;
        let (r, c) = self.dims(a);
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, value, mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(r, c, value, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", &[m, k], &[k2, n]));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let dst = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (d, y) in dst.iter_mut().zip(brow) {
                    *d += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(c, r, out, Op::Transpose(a), rg)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let av = self.value(a);
        if let Some(bad) = av.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("softmax_rows input contains {bad}")));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                sum += *d;
            }
            dst.iter_mut().for_each(|d| *d /= sum);
        }
        let rg = self.rg(a);
        Ok(self.push(r, c, out, Op::SoftmaxRows(a), rg))
    }

    /// Row-wise layer normalization with affine gain and bias (each `1×n`).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (m, n) = self.dims(a);
        for p in [gain, bias] {
            if self.dims(p) != (1, n) {
                let (pr, pc) = self.dims(p);
                return Err(shape_err("layer_norm", &[m, n], &[pr, pc]));
            }
        }
        let mean = self.sum_cols(a);
        let mean = self.scale(mean, 1.0 / n as f64);
        let mean = self.broadcast_cols(mean, n)?;
        let centered = self.sub(a, mean)?;
        let sq = self.mul(centered, centered)?;
        let var = self.sum_cols(sq);
        let var = self.scale(var, 1.0 / n as f64);
        let var = self.add_const(var, eps);
        let inv_std = self.powf(var, -0.5);
        let inv_std = self.broadcast_cols(inv_std, n)?;
        let normed = self.mul(centered, inv_std)?;
        let gain = self.broadcast_rows(gain, m)?;
        let bias = self.broadcast_rows(bias, m)?;
        let scaled = self.mul(normed, gain)?;
        self.add(scaled, bias)
    }

    // ---- reductions and broadcasts --------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(1, 1, vec![s], Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Expands a scalar to `rows×cols`.
    pub fn expand(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r * c != 1 {
            return Err(shape_err("expand", &[r, c], &[1, 1]));
        }
        let v = self.value(a)[0];
        let rg = self.rg(a);
        Ok(self.push(rows, cols, vec![v; rows * cols], Op::Expand(a), rg))
    }

    /// `m×n → 1×n` column sums.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let av = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(&av[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        self.push(1, c, out, Op::SumRows(a), rg)
    }

    /// `1×n → m×n` by repeating the row.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r != 1 {
            return Err(shape_err("broadcast_rows", &[r, c], &[1, c]));
        }
        let row = self.value(a).to_vec();
        let mut out = Vec::with_capacity(m * c);
        for _ in 0..m {
            out.extend_from_slice(&row);
        }
        let rg = self.rg(a);
        Ok(self.push(m, c, out, Op::BroadcastRows(a), rg))
    }

    /// `m×n → m×1` row sums.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).chunks(c.max(1)).map(|row| row.iter().sum()).collect();
        let rg = self.rg(a);
        self.push(r, 1, out, Op::SumCols(a), rg)
    }

    /// `m×1 → m×n` by repeating the column.
    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if c != 1 {
            return Err(shape_err("broadcast_cols", &[r, c], &[r, 1]));
        }
        let out = self
            .value(a)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, n))
            .collect();
        let rg = self.rg(a);
        Ok(self.push(r, n, out, Op::BroadcastCols(a), rg))
    }

    /// `a + b` where `b` is a `1×n` row added to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, _) = self.dims(a);
        let b = self.broadcast_rows(b, m)?;
        self.add(a, b)
    }

    /// `x·W + b` with `b` a `1×out` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    // ---- slicing and reshaping ------------------------------------------

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(shape_err("slice_cols", &[r, c], &[start, len]));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(r, len, out, Op::SliceCols(a, start), rg))
    }

    /// Places `a` at column offset `start` inside a zero matrix with `total` columns.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + c > total {
            return Err(shape_err("pad_cols", &[r, c], &[start, total]));
        }
        let av = self.value(a);
        let mut out = vec![0.0; r * total];
        for i in 0..r {
            out[i * total + start..i * total + start + c].copy_from_slice(&av[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(r, total, out, Op::PadCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > r {
            return Err(shape_err("slice_rows", &[r, c], &[start, len]));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(len, c, out, Op::SliceRows(a, start), rg))
    }

    pub fn pad_rows(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + r > total {
            return Err(shape_err("pad_rows", &[r, c], &[start, total]));
        }
        let mut out = vec![0.0; total * c];
        out[start * c..(start + r) * c].copy_from_slice(self.value(a));
        let rg = self.rg(a);
        Ok(self.push(total, c, out, Op::PadRows(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let (r, _) = self.dims(first);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(shape_err("concat_cols", &[r, total], &[pr, pc]));
            }
            total += pc;
        }
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let (_, pc) = self.dims(p);
            let pv = self.value(p);
            for i in 0..r {
                out[i * total + off..i * total + off + pc].copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(r, total, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r * c != rows * cols {
            return Err(shape_err("reshape", &[r, c], &[rows, cols]));
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(rows, cols, v, Op::Reshape(a), rg))
    }

    /// Selects one entry (flat row-major index) as a 1×1 node.
    pub fn index(&mut self, a: Var, flat: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if flat >= r * c {
            return Err(shape_err("index", &[r, c], &[flat]));
        }
        let v = self.value(a)[flat];
        let rg = self.rg(a);
        Ok(self.push(1, 1, vec![v], Op::Index(a, flat), rg))
    }

    fn scatter(&mut self, a: Var, flat: usize, rows: usize, cols: usize) -> Var {
        let mut out = vec![0.0; rows * cols];
        out[flat] = self.value(a)[0];
        let rg = self.rg(a);
        self.push(rows, cols, out, Op::Scatter(a, flat), rg)
    }

    /// Scalar node times matrix.
    pub fn mul_scalar(&mut self, s: Var, a: Var) -> Result<Var> {
        self.mul(a, s)
    }

    // ---- differentiation ------------------------------------------------

    /// Gradients of the scalar `loss` with respect to `wrt`.
    ///
    /// With `create_graph` the returned nodes stay connected to the graph and
    /// can be differentiated again; otherwise they are detached copies.
    pub fn grad(&mut self, loss: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let acc = self.reverse_sweep(loss)?;
        wrt.iter()
            .map(|&w| {
                let (r, c) = self.dims(w);
                Ok(match acc.get(&w.0) {
                    Some(&g) if create_graph => g,
                    Some(&g) => self.detach(g),
                    None => self.zeros(r, c),
                })
            })
            .collect()
    }

    /// Accumulates `dloss/dleaf` for every grad-requiring leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let acc = self.reverse_sweep(loss)?;
        for (id, g) in acc {
            if matches!(self.nodes[id].op, Op::Leaf) && self.nodes[id].requires_grad {
                let gv = self.nodes[g.0].value.clone();
                match self.leaf_grads.get_mut(&id) {
                    Some(prev) => prev.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                    None => {
                        self.leaf_grads.insert(id, gv);
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulated into a leaf by previous `backward` calls.
    pub fn leaf_grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    /// Adds the leaf's accumulated gradient into `t.grad` (no-op if unreached).
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.leaf_grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn reverse_sweep(&mut self, loss: Var) -> Result<HashMap<usize, Var>> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut acc: Vec<Option<Var>> = vec![None; loss.0 + 1];
        acc[loss.0] = Some(self.scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = acc[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            for (input, contrib) in self.vjp(Var(id), &op, g)? {
                acc[input.0] = Some(match acc[input.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        Ok(acc
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (i, g)))
            .collect())
    }

    /// Vector-Jacobian products of one node, expressed as graph operations.
    fn vjp(&mut self, out: Var, op: &Op, g: Var) -> Result<Vec<(Var, Var)>> {
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(a) {
                    res.push((a, g));
                }
                if self.rg(b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(a) {
                    res.push((a, g));
                }
                if self.rg(b) {
                    let ng = self.neg(g);
                    res.push((b, ng));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let d = self.mul(g, b)?;
                    res.push((a, d));
                }
                if self.rg(b) {
                    let d = self.mul(g, a)?;
                    res.push((b, d));
                }
            }
            Op::Scale(a, c) => {
                let d = self.scale(g, c);
                res.push((a, d));
            }
            Op::AddConst(a) => res.push((a, g)),
            Op::Relu(a) => {
                let (r, c) = self.dims(a);
                let mask = self
                    .value(a)
                    .iter()
                    .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                let mask = self.constant_values(r, c, mask)?;
                let d = self.mul(g, mask)?;
                res.push((a, d));
            }
            Op::Sigmoid(a) => {
                let yy = self.mul(out, out)?;
                let dy = self.sub(out, yy)?;
                let d = self.mul(g, dy)?;
                res.push((a, d));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                let d = self.mul(g, s)?;
                res.push((a, d));
            }
            Op::Powf(a, p) => {
                let pm1 = self.powf(a, p - 1.0);
                let dp = self.scale(pm1, p);
                let d = self.mul(g, dp)?;
                res.push((a, d));
            }
            Op::MatMul(a, b) => {
                if self.rg(a) {
                    let bt = self.transpose(b);
                    let d = self.matmul(g, bt)?;
                    res.push((a, d));
                }
                if self.rg(b) {
                    let at = self.transpose(a);
                    let d = self.matmul(at, g)?;
                    res.push((b, d));
                }
            }
            Op::Transpose(a) => {
                let d = self.transpose(g);
                res.push((a, d));
            }
            Op::SoftmaxRows(a) => {
                let (_, c) = self.dims(a);
                let gy = self.mul(g, out)?;
                let s = self.sum_cols(gy);
                let s = self.broadcast_cols(s, c)?;
                let centered = self.sub(g, s)?;
                let d = self.mul(out, centered)?;
                res.push((a, d));
            }
            Op::SumAll(a) => {
                let (r, c) = self.dims(a);
                let d = self.expand(g, r, c)?;
                res.push((a, d));
            }
            Op::Expand(a) => {
                let d = self.sum(g);
                res.push((a, d));
            }
            Op::SumRows(a) => {
                let (r, _) = self.dims(a);
                let d = self.broadcast_rows(g, r)?;
                res.push((a, d));
            }
            Op::BroadcastRows(a) => {
                let d = self.sum_rows(g);
                res.push((a, d));
            }
            Op::SumCols(a) => {
                let (_, c) = self.dims(a);
                let d = self.broadcast_cols(g, c)?;
                res.push((a, d));
            }
            Op::BroadcastCols(a) => {
                let d = self.sum_cols(g);
                res.push((a, d));
            }
            Op::SliceCols(a, start) => {
                let (_, c) = self.dims(a);
                let d = self.pad_cols(g, start, c)?;
                res.push((a, d));
            }
            Op::PadCols(a, start) => {
                let (_, c) = self.dims(a);
                let d = self.slice_cols(g, start, c)?;
                res.push((a, d));
            }
            Op::SliceRows(a, start) => {
                let (r, _) = self.dims(a);
                let d = self.pad_rows(g, start, r)?;
                res.push((a, d));
            }
            Op::PadRows(a, start) => {
                let (r, _) = self.dims(a);
                let d = self.slice_rows(g, start, r)?;
                res.push((a, d));
            }
            Op::ConcatCols(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let (_, pc) = self.dims(p);
                    if self.rg(p) {
                        let d = self.slice_cols(g, off, pc)?;
                        res.push((p, d));
                    }
                    off += pc;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.dims(a);
                let d = self.reshape(g, r, c)?;
                res.push((a, d));
            }
            Op::Index(a, flat) => {
                let (r, c) = self.dims(a);
                let d = self.scatter(g, flat, r, c);
                res.push((a, d));
            }
            Op::Scatter(a, flat) => {
                let d = self.index(g, flat)?;
                res.push((a, d));
            }
        }
        Ok(res)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}
