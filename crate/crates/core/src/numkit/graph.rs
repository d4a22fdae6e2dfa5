use rand::Rng;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation implemented outside this module.
///
/// `backward` receives the recorded inputs, the output and the upstream
/// gradient, and returns one optional gradient per input.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    Outer(Var, Var),
    Dot(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    ScalarMul(Var, Var),
    ScalarDiv(Var, Var),
    AddBias(Var, Var),
    Exp(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Relu(Var),
    Abs(Var),
    ClampMin(Var, f64),
    Softmax(Var, usize),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MaxAxis(Var, Vec<usize>),
    Row(Var, usize),
    Element(Var, usize),
    StackRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    Conv1d { x: Var, kernel: Var, dilation: usize },
    Mask(Var, Vec<f64>),
    BceWithLogits(Var, Tensor),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Operations are recorded in execution order and
/// replayed backwards by [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: gradients of every node the loss depends on.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(op: &str, msg: String) -> Error {
    Error::Dimension(format!("{op}: {msg}"))
}

fn expect_rank(op: &str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(dim_err(op, format!("expected rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn expect_scalar(op: &str, t: &Tensor) -> Result<()> {
    if t.len() != 1 {
        return Err(dim_err(op, format!("expected a scalar, got shape {:?}", t.shape())));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

fn add_into(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => kernels::axpy(1.0, g.data(), t.data_mut()),
        None => *slot = Some(g.clone()),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Places a tensor on the tape; it is a gradient target iff
    /// `requires_grad` is set on it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.without_grad())
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, x: Var, name: &str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(value, op, &[x], name)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, op, &[a, b], name)
    }

    /// Matrix product of `m×k` and `k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul", ta, 2)?;
        expect_rank("matmul", tb, 2)?;
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        if tb.shape()[0] != k {
            return Err(dim_err(
                "matmul",
                format!("inner dimensions {:?} × {:?}", ta.shape(), tb.shape()),
            ));
        }
        let value = Tensor::new(&[m, n], kernels::matmul(ta.data(), tb.data(), m, k, n))?;
        self.push(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `m×n` matrix times an `n`-vector.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (ta, tx) = (self.value(a), self.value(x));
        expect_rank("matvec", ta, 2)?;
        expect_rank("matvec", tx, 1)?;
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        if tx.len() != n {
            return Err(dim_err("matvec", format!("{:?} × {:?}", ta.shape(), tx.shape())));
        }
        let data = (0..m).map(|i| kernels::dot(ta.row(i), tx.data())).collect();
        self.push(Tensor::vector(data), Op::MatVec(a, x), &[a, x], "matvec")
    }

    /// `a bᵀ` for vectors.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("outer", ta, 1)?;
        expect_rank("outer", tb, 1)?;
        let value = Tensor::new(&[ta.len(), tb.len()], kernels::matmul(ta.data(), tb.data(), ta.len(), 1, tb.len()))?;
        self.push(value, Op::Outer(a, b), &[a, b], "outer")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("dot", ta, 1)?;
        same_shape("dot", ta, tb)?;
        let value = Tensor::scalar(kernels::dot(ta.data(), tb.data()));
        self.push(value, Op::Dot(a, b), &[a, b], "dot")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        expect_rank("transpose", t, 2)?;
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let value = Tensor::new(&[c, r], kernels::transpose(t.data(), r, c))?;
        self.push(value, Op::Transpose(x), &[x], "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "scale", |v| v * c, Op::Scale(x, c))
    }

    /// Addition of a constant.
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "shift", |v| v + c, Op::Shift(x))
    }

    /// Scalar-with-tensor product; the only broadcast the tape supports
    /// besides [`Graph::add_bias`].
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        expect_scalar("scalar_mul", self.value(s))?;
        let c = self.value(s).item();
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::ScalarMul(s, x), &[s, x], "scalar_mul")
    }

    pub fn scalar_div(&mut self, x: Var, s: Var) -> Result<Var> {
        expect_scalar("scalar_div", self.value(s))?;
        let c = self.value(s).item();
        let value = self.value(x).map(|v| v / c);
        self.push(value, Op::ScalarDiv(x, s), &[x, s], "scalar_div")
    }

    /// Adds an `n`-vector to every row of an `L×n` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        expect_rank("add_bias", tx, 2)?;
        expect_rank("add_bias", tb, 1)?;
        if tx.shape()[1] != tb.len() {
            return Err(dim_err("add_bias", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let mut value = tx.clone();
        let bias = tb.data().to_vec();
        for r in 0..value.rows() {
            kernels::axpy(1.0, &bias, value.row_mut(r));
        }
        self.push(value, Op::AddBias(x, b), &[x, b], "add_bias")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", f64::exp, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "log_sigmoid", kernels::log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "abs", f64::abs, Op::Abs(x))
    }

    /// `max(x, c)` elementwise; gradient passes where `x > c`.
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "clamp_min", |v| v.max(c), Op::ClampMin(x, c))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || t.shape()[axis] == 0 {
            return Err(dim_err("softmax", format!("empty or missing axis {axis} in {:?}", t.shape())));
        }
        let (o, n, i) = kernels::axis_split(t.shape(), axis);
        let value = Tensor::new(t.shape(), kernels::softmax_axis(t.data(), o, n, i))?;
        self.push(value, Op::Softmax(x, axis), &[x], "softmax")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(dim_err("mean", "empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || t.shape()[axis] == 0 {
            return Err(dim_err("sum_axis", format!("empty or missing axis {axis} in {:?}", t.shape())));
        }
        let (o, n, i) = kernels::axis_split(t.shape(), axis);
        let mut out = vec![0.0; o * i];
        for a in 0..o {
            for j in 0..n {
                for b in 0..i {
                    out[a * i + b] += t.data()[(a * n + j) * i + b];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::SumAxis(x, axis), &[x], "sum_axis")
    }

    /// Max over one axis; the gradient flows to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || t.shape()[axis] == 0 {
            return Err(dim_err("max_axis", format!("empty or missing axis {axis} in {:?}", t.shape())));
        }
        let (o, n, i) = kernels::axis_split(t.shape(), axis);
        let mut out = vec![f64::NEG_INFINITY; o * i];
        let mut arg = vec![0; o * i];
        for a in 0..o {
            for j in 0..n {
                for b in 0..i {
                    let src = (a * n + j) * i + b;
                    if t.data()[src] > out[a * i + b] {
                        out[a * i + b] = t.data()[src];
                        arg[a * i + b] = src;
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::MaxAxis(x, arg), &[x], "max_axis")
    }

    /// Row `r` of a matrix as a vector.
    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        let t = self.value(x);
        expect_rank("row", t, 2)?;
        if r >= t.rows() {
            return Err(dim_err("row", format!("row {r} out of {}", t.rows())));
        }
        let value = Tensor::vector(t.row(r).to_vec());
        self.push(value, Op::Row(x, r), &[x], "row")
    }

    /// Flat element `idx` as a scalar.
    pub fn element(&mut self, x: Var, idx: usize) -> Result<Var> {
        let t = self.value(x);
        if idx >= t.len() {
            return Err(dim_err("element", format!("index {idx} out of {}", t.len())));
        }
        let value = Tensor::scalar(t.data()[idx]);
        self.push(value, Op::Element(x, idx), &[x], "element")
    }

    /// Stacks equally long vectors as rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let n = rows.first().map_or(0, |&r| self.value(r).len());
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let t = self.value(r);
            expect_rank("stack_rows", t, 1)?;
            if t.len() != n {
                return Err(dim_err("stack_rows", "rows of unequal length".into()));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(&[rows.len(), n], data)?;
        self.push(value, Op::StackRows(rows.to_vec()), rows, "stack_rows")
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err("concat_cols", "nothing to concatenate".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            expect_rank("concat_cols", t, 2)?;
            if t.rows() != rows {
                return Err(dim_err("concat_cols", format!("row counts {} and {}", rows, t.rows())));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(&[rows, total], data)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        expect_rank("slice_rows", t, 2)?;
        if start > end || end > t.rows() {
            return Err(dim_err("slice_rows", format!("{start}..{end} of {} rows", t.rows())));
        }
        let c = t.cols();
        let value = Tensor::new(&[end - start, c], t.data()[start * c..end * c].to_vec())?;
        self.push(value, Op::SliceRows(x, start), &[x], "slice_rows")
    }

    /// Centered dilated temporal convolution: `x` is `L×D_in`, `kernel` is
    /// `width×D_in×D_out` with odd width, output is `L×D_out`.
    pub fn dilated_conv1d(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        expect_rank("dilated_conv1d", tx, 2)?;
        expect_rank("dilated_conv1d", tk, 3)?;
        let (len, d_in) = (tx.shape()[0], tx.shape()[1]);
        let (width, k_in, d_out) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
        if dilation == 0 || width % 2 == 0 {
            return Err(Error::Config(format!(
                "dilated_conv1d needs odd width and dilation ≥ 1 (width {width}, dilation {dilation})"
            )));
        }
        if k_in != d_in {
            return Err(dim_err("dilated_conv1d", format!("input width {d_in}, kernel expects {k_in}")));
        }
        let data = kernels::conv1d(tx.data(), tk.data(), len, d_in, d_out, width, dilation);
        let value = Tensor::new(&[len, d_out], data)?;
        self.push(value, Op::Conv1d { x, kernel, dilation }, &[x, kernel], "dilated_conv1d")
    }

    /// Elementwise product with a constant mask.
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(dim_err("mask", format!("mask of {} for {} values", mask.len(), t.len())));
        }
        let data = t.data().iter().zip(&mask).map(|(a, b)| a * b).collect();
        let value = Tensor::new(t.shape(), data)?;
        self.push(value, Op::Mask(x, mask), &[x], "mask")
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mask(x, mask)
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        same_shape("bce_with_logits", t, targets)?;
        if t.is_empty() {
            return Err(dim_err("bce_with_logits", "empty input".into()));
        }
        let s: f64 = t.data().iter().zip(targets.data()).map(|(&z, &y)| kernels::bce_logit(z, y)).sum();
        let value = Tensor::scalar(s / t.len() as f64);
        self.push(value, Op::BceWithLogits(logits, targets.clone()), &[logits], "bce_with_logits")
    }

    /// Records an externally computed value together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.push(value, Op::Custom(inputs.to_vec(), op), inputs, name)
    }

    /// Reverse pass from a scalar loss. Every leaf that requires a gradient
    /// receives one, zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lt.shape(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], ta.shape(), |da| {
                        kernels::matmul_grad_lhs(gd, tb.data(), da, m, k, n)
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], tb.shape(), |db| {
                        kernels::matmul_grad_rhs(ta.data(), gd, db, m, k, n)
                    });
                }
            }
            Op::MatVec(a, x) => {
                let (ta, tx) = (self.value(*a), self.value(*x));
                let n = tx.len();
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], ta.shape(), |da| {
                        for (r, &gr) in gd.iter().enumerate() {
                            kernels::axpy(gr, tx.data(), &mut da[r * n..(r + 1) * n]);
                        }
                    });
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], tx.shape(), |dx| {
                        for (r, &gr) in gd.iter().enumerate() {
                            kernels::axpy(gr, ta.row(r), dx);
                        }
                    });
                }
            }
            Op::Outer(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = tb.len();
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], ta.shape(), |da| {
                        for (r, v) in da.iter_mut().enumerate() {
                            *v += kernels::dot(&gd[r * n..(r + 1) * n], tb.data());
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], tb.shape(), |db| {
                        for (r, &av) in ta.data().iter().enumerate() {
                            kernels::axpy(av, &gd[r * n..(r + 1) * n], db);
                        }
                    });
                }
            }
            Op::Dot(a, b) => {
                let s = gd[0];
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], ta.shape(), |da| kernels::axpy(s, tb.data(), da));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], tb.shape(), |db| kernels::axpy(s, ta.data(), db));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let back = kernels::transpose(gd, r, c);
                accumulate(&mut grads[x.0], self.shape(*x), |dx| kernels::axpy(1.0, &back, dx));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(&mut grads[v.0], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], out.shape(), |db| kernels::axpy(-1.0, gd, db));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], out.shape(), |da| {
                        for ((d, &gv), &bv) in da.iter_mut().zip(gd).zip(tb.data()) {
                            *d += gv * bv;
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], out.shape(), |db| {
                        for ((d, &gv), &av) in db.iter_mut().zip(gd).zip(ta.data()) {
                            *d += gv * av;
                        }
                    });
                }
            }
            Op::Div(a, b) => {
                let tb = self.value(*b);
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], out.shape(), |da| {
                        for ((d, &gv), &bv) in da.iter_mut().zip(gd).zip(tb.data()) {
                            *d += gv / bv;
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], out.shape(), |db| {
                        for (((d, &gv), &bv), &ov) in db.iter_mut().zip(gd).zip(tb.data()).zip(out.data()) {
                            *d -= gv * ov / bv;
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                accumulate(&mut grads[x.0], out.shape(), |dx| kernels::axpy(*c, gd, dx));
            }
            Op::Shift(x) => add_into(&mut grads[x.0], g),
            Op::ScalarMul(s, x) => {
                let c = self.value(*s).item();
                if self.wants(*s) {
                    let ds = kernels::dot(gd, self.value(*x).data());
                    accumulate(&mut grads[s.0], self.shape(*s), |d| d[0] += ds);
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], out.shape(), |dx| kernels::axpy(c, gd, dx));
                }
            }
            Op::ScalarDiv(x, s) => {
                let c = self.value(*s).item();
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], out.shape(), |dx| kernels::axpy(1.0 / c, gd, dx));
                }
                if self.wants(*s) {
                    let ds = -kernels::dot(gd, out.data()) / c;
                    accumulate(&mut grads[s.0], self.shape(*s), |d| d[0] += ds);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.wants(*b) {
                    let n = out.cols();
                    accumulate(&mut grads[b.0], self.shape(*b), |db| {
                        for r in 0..out.rows() {
                            kernels::axpy(1.0, &gd[r * n..(r + 1) * n], db);
                        }
                    });
                }
            }
            Op::Exp(x) => self.elementwise_back(*x, out, g, grads, |_, y| y),
            Op::Sigmoid(x) => self.elementwise_back(*x, out, g, grads, |_, y| y * (1.0 - y)),
            Op::LogSigmoid(x) => self.elementwise_back(*x, out, g, grads, |xv, _| kernels::sigmoid(-xv)),
            Op::Relu(x) => self.elementwise_back(*x, out, g, grads, |xv, _| if xv > 0.0 { 1.0 } else { 0.0 }),
            Op::Abs(x) => self.elementwise_back(*x, out, g, grads, |xv, _| {
                if xv > 0.0 {
                    1.0
                } else if xv < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::ClampMin(x, c) => {
                let c = *c;
                self.elementwise_back(*x, out, g, grads, |xv, _| if xv > c { 1.0 } else { 0.0 })
            }
            Op::Softmax(x, axis) => {
                let (o, n, inner) = kernels::axis_split(out.shape(), *axis);
                let y = out.data();
                accumulate(&mut grads[x.0], out.shape(), |dx| {
                    for a in 0..o {
                        for b in 0..inner {
                            let idx = |j: usize| (a * n + j) * inner + b;
                            let s: f64 = (0..n).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                dx[idx(j)] += y[idx(j)] * (gd[idx(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                accumulate(&mut grads[x.0], self.shape(*x), |dx| dx.iter_mut().for_each(|v| *v += s));
            }
            Op::Mean(x) => {
                let s = gd[0] / self.value(*x).len() as f64;
                accumulate(&mut grads[x.0], self.shape(*x), |dx| dx.iter_mut().for_each(|v| *v += s));
            }
            Op::SumAxis(x, axis) => {
                let (o, n, inner) = kernels::axis_split(self.shape(*x), *axis);
                accumulate(&mut grads[x.0], self.shape(*x), |dx| {
                    for a in 0..o {
                        for j in 0..n {
                            for b in 0..inner {
                                dx[(a * n + j) * inner + b] += gd[a * inner + b];
                            }
                        }
                    }
                });
            }
            Op::MaxAxis(x, arg) => {
                accumulate(&mut grads[x.0], self.shape(*x), |dx| {
                    for (k, &src) in arg.iter().enumerate() {
                        dx[src] += gd[k];
                    }
                });
            }
            Op::Row(x, r) => {
                let c = out.len();
                let r = *r;
                accumulate(&mut grads[x.0], self.shape(*x), |dx| {
                    kernels::axpy(1.0, gd, &mut dx[r * c..(r + 1) * c])
                });
            }
            Op::Element(x, idx) => {
                let idx = *idx;
                accumulate(&mut grads[x.0], self.shape(*x), |dx| dx[idx] += gd[0]);
            }
            Op::StackRows(rows) => {
                let n = out.cols();
                for (r, v) in rows.iter().enumerate() {
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], self.shape(*v), |dv| {
                            kernels::axpy(1.0, &gd[r * n..(r + 1) * n], dv)
                        });
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for v in parts {
                    let w = self.value(*v).cols();
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], self.shape(*v), |dv| {
                            for r in 0..out.rows() {
                                let src = &gd[r * total + offset..r * total + offset + w];
                                kernels::axpy(1.0, src, &mut dv[r * w..(r + 1) * w]);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::SliceRows(x, start) => {
                let c = out.cols();
                let s = *start * c;
                accumulate(&mut grads[x.0], self.shape(*x), |dx| {
                    kernels::axpy(1.0, gd, &mut dx[s..s + gd.len()])
                });
            }
            Op::Conv1d { x, kernel, dilation } => {
                let (tx, tk) = (self.value(*x), self.value(*kernel));
                let (len, d_in) = (tx.shape()[0], tx.shape()[1]);
                let (width, d_out) = (tk.shape()[0], tk.shape()[2]);
                let mut dx = self.wants(*x).then(|| grads[x.0].take().unwrap_or_else(|| Tensor::zeros(tx.shape())));
                let mut dk = self
                    .wants(*kernel)
                    .then(|| grads[kernel.0].take().unwrap_or_else(|| Tensor::zeros(tk.shape())));
                kernels::conv1d_backward(
                    tx.data(),
                    tk.data(),
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dk.as_mut().map(|t| t.data_mut()),
                    len,
                    d_in,
                    d_out,
                    width,
                    *dilation,
                );
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if let Some(dk) = dk {
                    grads[kernel.0] = Some(dk);
                }
            }
            Op::Mask(x, mask) => {
                accumulate(&mut grads[x.0], out.shape(), |dx| {
                    for ((d, &gv), &m) in dx.iter_mut().zip(gd).zip(mask) {
                        *d += gv * m;
                    }
                });
            }
            Op::BceWithLogits(z, targets) => {
                let tz = self.value(*z);
                let scale = gd[0] / tz.len() as f64;
                accumulate(&mut grads[z.0], tz.shape(), |dz| {
                    for ((d, &zv), &y) in dz.iter_mut().zip(tz.data()).zip(targets.data()) {
                        *d += scale * (kernels::sigmoid(zv) - y);
                    }
                });
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let back = op.backward(&values, out, g);
                for (v, gv) in inputs.iter().zip(back) {
                    if let Some(gv) = gv {
                        if self.wants(*v) {
                            add_into(&mut grads[v.0], &gv);
                        }
                    }
                }
            }
        }
    }

    /// Backward for `y = f(x)` elementwise; `deriv(x, y)` is `f'(x)`.
    fn elementwise_back(
        &self,
        x: Var,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        deriv: impl Fn(f64, f64) -> f64,
    ) {
        let tx = self.value(x);
        accumulate(&mut grads[x.0], tx.shape(), |dx| {
            for (((d, &gv), &xv), &yv) in dx.iter_mut().zip(g.data()).zip(tx.data()).zip(out.data()) {
                *d += gv * deriv(xv, yv);
            }
        });
    }
}
