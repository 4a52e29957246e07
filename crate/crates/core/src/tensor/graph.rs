use std::cell::{Cell, RefCell};

use super::gemm::{gemm, Layout};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Concat { parts: Vec<Var>, outer: usize, widths: Vec<usize> },
    Slice { a: Var, outer: usize, src_width: usize, offset: usize, width: usize },
    Reshape(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    Map { a: Var, deriv: Vec<f64> },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    Sum { a: Var, outer: usize, len: usize, inner: usize, scale: f64 },
    MaxPool { a: Var, argmax: Vec<usize> },
    Conv1d(Box<ConvRecord>),
    Lstm(Box<LstmRecord>),
}

#[derive(Debug)]
struct ConvRecord {
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    cols: Vec<f64>,
    t_in: usize,
    c_in: usize,
    width: usize,
    c_out: usize,
    stride: usize,
    padding: usize,
    t_out: usize,
}

/// Per-step activations kept for backpropagation through time, stored in
/// processing order.
#[derive(Debug)]
struct LstmRecord {
    pre: Var,
    w_hh: Var,
    reverse: bool,
    steps: usize,
    hidden: usize,
    gates: Vec<f64>,
    cells: Vec<f64>,
    states: Vec<f64>,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Reshape(a) | Exp(a) | Ln(a) | Tanh(a) | Sigmoid(a)
            | Relu(a) | Abs(a) | Sqrt(a) => vec![*a],
            Transpose { a, .. }
            | Slice { a, .. }
            | Map { a, .. }
            | Softmax { a, .. }
            | Sum { a, .. }
            | MaxPool { a, .. } => vec![*a],
            Concat { parts, .. } => parts.clone(),
            Conv1d(r) => {
                let mut v = vec![r.input, r.kernel];
                v.extend(r.bias);
                v
            }
            Lstm(r) => vec![r.pre, r.w_hh],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass recorded for reverse accumulation.
///
/// Operations take `&self`, so expressions can nest freely. Nodes are
/// appended in evaluation order, which is already a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    backward_done: Cell<bool>,
}

/// `outer x len x inner` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    a == b || b.iter().product::<usize>() == 1 || (b.len() <= a.len() && a.ends_with(b))
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary(
        &self,
        a: Var,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(Var) -> Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())?
        };
        self.push(value, op(a), name)
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if !broadcastable(x.shape(), y.shape()) {
                return Err(Error::shape(
                    name,
                    format!(
                        "cannot broadcast right operand {:?} onto left operand {:?}",
                        y.shape(),
                        x.shape()
                    ),
                ));
            }
            let nb = y.numel();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| f(v, y.data()[i % nb]))
                .collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        self.push(value, op, name)
    }

    /// Elementwise `a + b`. `b` may be a single element or a suffix of
    /// `a`'s shape (e.g. a bias row added to every row of a matrix).
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise `a - b`, broadcasting as in [`Graph::add`].
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise `a * b`, broadcasting as in [`Graph::add`].
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise `a / b`, broadcasting as in [`Graph::add`].
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        if self.nodes.borrow()[b.0].value.data().contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "scale", |v| v * c, |a| Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "add_scalar", |v| v + c, Op::AddScalar)
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let (xs, ys) = (x.shape(), y.shape());
            if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[0] {
                return Err(Error::shape(
                    "matmul",
                    format!("cannot multiply {xs:?} by {ys:?}"),
                ));
            }
            let (m, k, n) = (xs[0], xs[1], ys[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, x.data(), Layout::rm(k), y.data(), Layout::rm(n), 0.0, &mut out);
            (Tensor::new(vec![m, n], out)?, m, k, n)
        };
        self.push(value, Op::MatMul { a, b, m, k, n }, "matmul")
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (value, rows, cols) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.shape().len() != 2 {
                return Err(Error::shape(
                    "transpose",
                    format!("expected a matrix, got {:?}", x.shape()),
                ));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x.data()[i * c + j];
                }
            }
            (Tensor::new(vec![c, r], out)?, r, c)
        };
        self.push(value, Op::Transpose { a, rows, cols }, "transpose")
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no tensors to concatenate"));
        }
        let (value, outer, widths) = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            let (outer, _, inner) = split_axis(&first, axis, "concat")?;
            let mut axis_total = 0;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let s = nodes[p.0].value.shape();
                let same_rank = s.len() == first.len();
                let same_rest = same_rank
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(d, (x, y))| d == axis || x == y);
                if !same_rest {
                    return Err(Error::shape(
                        "concat",
                        format!("shape {s:?} does not match {first:?} off axis {axis}"),
                    ));
                }
                axis_total += s[axis];
                widths.push(s[axis] * inner);
            }
            let row: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(outer * row);
            for o in 0..outer {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.0].value.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = first;
            shape[axis] = axis_total;
            (Tensor::new(shape, out)?, outer, widths)
        };
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            "concat",
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (value, outer, src_width, offset, width) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let (outer, axis_len, inner) = split_axis(x.shape(), axis, "slice")?;
            if len == 0 || start + len > axis_len {
                return Err(Error::shape(
                    "slice",
                    format!(
                        "range {start}..{} invalid for axis {axis} of {:?}",
                        start + len,
                        x.shape()
                    ),
                ));
            }
            let (src_width, offset, width) = (axis_len * inner, start * inner, len * inner);
            let mut out = Vec::with_capacity(outer * width);
            for o in 0..outer {
                let base = o * src_width + offset;
                out.extend_from_slice(&x.data()[base..base + width]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            (Tensor::new(shape, out)?, outer, src_width, offset, width)
        };
        self.push(
            value,
            Op::Slice {
                a,
                outer,
                src_width,
                offset,
                width,
            },
            "slice",
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(a), "reshape")
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, "exp", f64::exp, Op::Exp)
    }

    /// Natural log; non-positive inputs are a domain error.
    pub fn ln(&self, a: Var) -> Result<Var> {
        if self.nodes.borrow()[a.0].value.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("ln of a non-positive value".into()));
        }
        self.unary(a, "ln", f64::ln, Op::Ln)
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid)
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |v| v.max(0.0), Op::Relu)
    }

    /// `|a|`; the subgradient at zero is taken as zero.
    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary(a, "abs", f64::abs, Op::Abs)
    }

    /// Square root; requires strictly positive inputs.
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        if self.nodes.borrow()[a.0].value.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("sqrt of a non-positive value".into()));
        }
        self.unary(a, "sqrt", f64::sqrt, Op::Sqrt)
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(&self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Result<Var> {
        let (value, deriv) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())?;
            (value, x.data().iter().map(|&v| df(v)).collect())
        };
        self.push(value, Op::Map { a, deriv }, "map")
    }

    /// Softmax along `axis` (max-subtracted).
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let (value, outer, len, inner) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let (outer, len, inner) = split_axis(x.shape(), axis, "softmax")?;
            let mut out = vec![0.0; x.numel()];
            let d = x.data();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let max = (0..len).map(|l| d[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for l in 0..len {
                        let e = (d[idx(l)] - max).exp();
                        out[idx(l)] = e;
                        total += e;
                    }
                    for l in 0..len {
                        out[idx(l)] /= total;
                    }
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, outer, len, inner)
        };
        self.push(value, Op::Softmax { a, outer, len, inner }, "softmax")
    }

    fn reduce(&self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        let (value, outer, len, inner) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let (outer, len, inner, shape) = match axis {
                None => (1, x.numel(), 1, vec![1]),
                Some(ax) => {
                    let (o, l, i) = split_axis(x.shape(), ax, name)?;
                    let mut shape = x.shape().to_vec();
                    shape.remove(ax);
                    if shape.is_empty() {
                        shape.push(1);
                    }
                    (o, l, i, shape)
                }
            };
            let scale = if mean { 1.0 / len as f64 } else { 1.0 };
            let mut out = vec![0.0; outer * inner];
            let d = x.data();
            for o in 0..outer {
                for l in 0..len {
                    let row = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            out.iter_mut().for_each(|v| *v *= scale);
            (Tensor::new(shape, out)?, outer, len, inner)
        };
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        self.push(value, Op::Sum { a, outer, len, inner, scale }, name)
    }

    /// Sum over `axis`, or over everything when `axis` is `None` (shape `[1]`).
    pub fn sum(&self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    /// Mean over `axis`, or over everything when `axis` is `None`.
    pub fn mean(&self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    /// Max pooling along time for `[T, C]` input.
    pub fn max_pool_1d(&self, a: Var, width: usize, stride: usize) -> Result<Var> {
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let s = x.shape();
            if s.len() != 2 || width == 0 || stride == 0 || s[0] < width {
                return Err(Error::shape(
                    "max_pool_1d",
                    format!("window {width} stride {stride} does not fit input {s:?}"),
                ));
            }
            let (t, c) = (s[0], s[1]);
            let t_out = (t - width) / stride + 1;
            let mut out = vec![0.0; t_out * c];
            let mut argmax = vec![0; t_out * c];
            for o in 0..t_out {
                for ch in 0..c {
                    let mut best = o * stride * c + ch;
                    for w in 1..width {
                        let idx = (o * stride + w) * c + ch;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                    out[o * c + ch] = x.data()[best];
                    argmax[o * c + ch] = best;
                }
            }
            (Tensor::new(vec![t_out, c], out)?, argmax)
        };
        self.push(value, Op::MaxPool { a, argmax }, "max_pool_1d")
    }

    /// Mean over time of a `[T, C]` input, giving `[C]`.
    pub fn global_avg_pool_1d(&self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::shape(
                "global_avg_pool_1d",
                format!("expected [T, C], got {:?}", self.shape(a)),
            ));
        }
        self.mean(a, Some(0))
    }

    /// 1-D cross-correlation over time.
    ///
    /// `input: [T, C_in]`, `kernel: [K, C_in, C_out]`, `bias: [C_out]`;
    /// `out[t, o] = b[o] + Σ_k Σ_c x[t·stride + k − padding, c] · w[k, c, o]`
    /// with zeros outside the input.
    pub fn conv_1d(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (value, rec) = {
            let nodes = self.nodes.borrow();
            let (x, w) = (&nodes[input.0].value, &nodes[kernel.0].value);
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 2 || ws.len() != 3 || xs[1] != ws[1] || stride == 0 {
                return Err(Error::shape(
                    "conv_1d",
                    format!("input {xs:?} incompatible with kernel {ws:?} (stride {stride})"),
                ));
            }
            let (t_in, c_in) = (xs[0], xs[1]);
            let (width, c_out) = (ws[0], ws[2]);
            if t_in + 2 * padding < width {
                return Err(Error::shape(
                    "conv_1d",
                    format!("kernel width {width} exceeds padded length of input {xs:?}"),
                ));
            }
            let t_out = (t_in + 2 * padding - width) / stride + 1;
            let span = width * c_in;
            let mut cols = vec![0.0; t_out * span];
            for t in 0..t_out {
                for k in 0..width {
                    let pos = (t * stride + k) as isize - padding as isize;
                    if pos >= 0 && (pos as usize) < t_in {
                        let src = pos as usize * c_in;
                        let dst = t * span + k * c_in;
                        cols[dst..dst + c_in].copy_from_slice(&x.data()[src..src + c_in]);
                    }
                }
            }
            let mut out = vec![0.0; t_out * c_out];
            gemm(t_out, span, c_out, &cols, Layout::rm(span), w.data(), Layout::rm(c_out), 0.0, &mut out);
            if let Some(b) = bias {
                let bv = &nodes[b.0].value;
                if bv.shape() != [c_out] {
                    return Err(Error::shape(
                        "conv_1d",
                        format!("bias {:?} does not match {c_out} output channels", bv.shape()),
                    ));
                }
                for row in out.chunks_mut(c_out) {
                    for (o, b) in row.iter_mut().zip(bv.data()) {
                        *o += b;
                    }
                }
            }
            let rec = ConvRecord {
                input,
                kernel,
                bias,
                cols,
                t_in,
                c_in,
                width,
                c_out,
                stride,
                padding,
                t_out,
            };
            (Tensor::new(vec![t_out, c_out], out)?, rec)
        };
        self.push(value, Op::Conv1d(Box::new(rec)), "conv_1d")
    }

    /// LSTM recurrence over precomputed input projections.
    ///
    /// `pre: [T, 4n]` holds `x_t·W_ih + b` with gates packed `[i, f, g, o]`,
    /// `w_hh: [n, 4n]`. Starts from zero state, walks time backwards when
    /// `reverse`, and returns the final hidden state `[1, n]`.
    pub fn lstm_sequence(&self, pre: Var, w_hh: Var, reverse: bool) -> Result<Var> {
        let (value, rec) = {
            let nodes = self.nodes.borrow();
            let (x, w) = (&nodes[pre.0].value, &nodes[w_hh.0].value);
            let (xs, ws) = (x.shape(), w.shape());
            let n = ws.first().copied().unwrap_or(0);
            if xs.len() != 2 || ws.len() != 2 || xs[0] == 0 || n == 0 || ws[1] != 4 * n || xs[1] != 4 * n {
                return Err(Error::shape(
                    "lstm_sequence",
                    format!("inputs {xs:?} and recurrent weights {ws:?} do not match"),
                ));
            }
            let steps = xs[0];
            let (x, w) = (x.data(), w.data());
            let mut gates = vec![0.0; steps * 4 * n];
            let mut cells = vec![0.0; steps * n];
            let mut states = vec![0.0; steps * n];
            for s in 0..steps {
                let t = if reverse { steps - 1 - s } else { s };
                let z = &mut gates[s * 4 * n..(s + 1) * 4 * n];
                z.copy_from_slice(&x[t * 4 * n..(t + 1) * 4 * n]);
                if s > 0 {
                    let h_prev = &states[(s - 1) * n..s * n];
                    for (k, &hk) in h_prev.iter().enumerate() {
                        for (zj, wj) in z.iter_mut().zip(&w[k * 4 * n..(k + 1) * 4 * n]) {
                            *zj += hk * wj;
                        }
                    }
                }
                for j in 0..n {
                    z[j] = sigmoid(z[j]);
                    z[n + j] = sigmoid(z[n + j]);
                    z[2 * n + j] = z[2 * n + j].tanh();
                    z[3 * n + j] = sigmoid(z[3 * n + j]);
                    let c_prev = if s > 0 { cells[(s - 1) * n + j] } else { 0.0 };
                    let c = z[n + j] * c_prev + z[j] * z[2 * n + j];
                    cells[s * n + j] = c;
                    states[s * n + j] = z[3 * n + j] * c.tanh();
                }
            }
            let last = Tensor::new(vec![1, n], states[(steps - 1) * n..].to_vec())?;
            let rec = LstmRecord {
                pre,
                w_hh,
                reverse,
                steps,
                hidden: n,
                gates,
                cells,
                states,
            };
            (last, rec)
        };
        self.push(value, Op::Lstm(Box::new(rec)), "lstm_sequence")
    }

    /// Reverse accumulation from a single-element `root`.
    ///
    /// Leaf gradients are retained and readable through [`Graph::grad`].
    /// A second call without [`Graph::reset_grads`] is an error.
    pub fn backward(&self, root: Var) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::Backward(
                "gradients already computed; call reset_grads before another backward".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if root.0 >= nodes.len() {
            return Err(Error::Backward(format!("unknown node {}", root.0)));
        }
        if nodes[root.0].value.numel() != 1 {
            return Err(Error::Backward(format!(
                "root must be a scalar, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    /// Gradient of the last backward root with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.nodes.borrow()[v.0].value.shape().to_vec();
        Tensor::new(shape, g.clone()).ok()
    }

    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let out = node.value.data();
    let val = |v: &Var| nodes[v.0].value.data();
    let wants = |v: &Var| nodes[v.0].requires_grad;
    macro_rules! slot {
        ($v:expr) => {
            accumulate(&mut grads[$v.0], nodes[$v.0].value.numel())
        };
    }
    macro_rules! elementwise {
        ($a:expr, |$j:ident, $gj:ident| $e:expr) => {
            if wants($a) {
                let ga = slot!($a);
                for ($j, (acc, &$gj)) in ga.iter_mut().zip(g).enumerate() {
                    *acc += $e;
                }
            }
        };
    }
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            elementwise!(a, |_j, gj| gj);
            if wants(b) {
                let gb = slot!(b);
                let nb = gb.len();
                for (j, gj) in g.iter().enumerate() {
                    gb[j % nb] += sign * gj;
                }
            }
        }
        Op::Mul(a, b) => {
            let (x, y) = (val(a), val(b));
            let nb = y.len();
            elementwise!(a, |j, gj| gj * y[j % nb]);
            if wants(b) {
                let gb = slot!(b);
                for (j, gj) in g.iter().enumerate() {
                    gb[j % nb] += gj * x[j];
                }
            }
        }
        Op::Div(a, b) => {
            let y = val(b);
            let nb = y.len();
            elementwise!(a, |j, gj| gj / y[j % nb]);
            if wants(b) {
                let gb = slot!(b);
                for (j, gj) in g.iter().enumerate() {
                    // d(x/y)/dy = -(x/y)/y
                    gb[j % nb] -= gj * out[j] / y[j % nb];
                }
            }
        }
        Op::Scale(a, c) => elementwise!(a, |_j, gj| gj * c),
        Op::AddScalar(a) | Op::Reshape(a) => elementwise!(a, |_j, gj| gj),
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (x, y) = (val(a), val(b));
            if wants(a) {
                // dA = G · Bᵀ
                gemm(m, n, k, g, Layout::rm(n), y, Layout::rm_t(n), 1.0, slot!(a));
            }
            if wants(b) {
                // dB = Aᵀ · G
                gemm(k, m, n, x, Layout::rm_t(k), g, Layout::rm(n), 1.0, slot!(b));
            }
        }
        Op::Transpose { a, rows, cols } => {
            if wants(a) {
                let ga = slot!(a);
                for r in 0..*rows {
                    for c in 0..*cols {
                        ga[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        Op::Concat { parts, outer, widths } => {
            let row: usize = widths.iter().sum();
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(widths) {
                if wants(p) {
                    let gp = slot!(p);
                    for o in 0..*outer {
                        let src = &g[o * row + offset..o * row + offset + w];
                        for (acc, v) in gp[o * w..(o + 1) * w].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::Slice { a, outer, src_width, offset, width } => {
            if wants(a) {
                let ga = slot!(a);
                for o in 0..*outer {
                    let dst = o * src_width + offset;
                    for (acc, v) in ga[dst..dst + width].iter_mut().zip(&g[o * width..(o + 1) * width]) {
                        *acc += v;
                    }
                }
            }
        }
        Op::Exp(a) => elementwise!(a, |j, gj| gj * out[j]),
        Op::Ln(a) => {
            let x = val(a);
            elementwise!(a, |j, gj| gj / x[j]);
        }
        Op::Tanh(a) => elementwise!(a, |j, gj| gj * (1.0 - out[j] * out[j])),
        Op::Sigmoid(a) => elementwise!(a, |j, gj| gj * out[j] * (1.0 - out[j])),
        Op::Relu(a) => {
            let x = val(a);
            elementwise!(a, |j, gj| if x[j] > 0.0 { gj } else { 0.0 });
        }
        Op::Abs(a) => {
            let x = val(a);
            elementwise!(a, |j, gj| if x[j] > 0.0 {
                gj
            } else if x[j] < 0.0 {
                -gj
            } else {
                0.0
            });
        }
        Op::Sqrt(a) => elementwise!(a, |j, gj| gj * 0.5 / out[j]),
        Op::Map { a, deriv } => elementwise!(a, |j, gj| gj * deriv[j]),
        Op::Softmax { a, outer, len, inner } => {
            if wants(a) {
                let ga = slot!(a);
                let (len, inner) = (*len, *inner);
                for o in 0..*outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * out[idx(l)]).sum();
                        for l in 0..len {
                            ga[idx(l)] += out[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
            }
        }
        Op::Sum { a, outer, len, inner, scale } => {
            if wants(a) {
                let ga = slot!(a);
                let (len, inner, scale) = (*len, *inner, *scale);
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (acc, v) in dst.iter_mut().zip(src) {
                            *acc += v * scale;
                        }
                    }
                }
            }
        }
        Op::MaxPool { a, argmax } => {
            if wants(a) {
                let ga = slot!(a);
                for (gj, &src) in g.iter().zip(argmax) {
                    ga[src] += gj;
                }
            }
        }
        Op::Conv1d(r) => {
            let span = r.width * r.c_in;
            if wants(&r.kernel) {
                // dW = colsᵀ · G
                gemm(span, r.t_out, r.c_out, &r.cols, Layout::rm_t(span), g, Layout::rm(r.c_out), 1.0, slot!(r.kernel));
            }
            if let Some(b) = &r.bias {
                if wants(b) {
                    let gb = slot!(b);
                    for row in g.chunks(r.c_out) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            if wants(&r.input) {
                // dCols = G · Wᵀ, then scatter back onto the input positions
                let w = val(&r.kernel);
                let mut dcols = vec![0.0; r.t_out * span];
                gemm(r.t_out, r.c_out, span, g, Layout::rm(r.c_out), w, Layout::rm_t(r.c_out), 0.0, &mut dcols);
                let gx = slot!(r.input);
                for t in 0..r.t_out {
                    for k in 0..r.width {
                        let pos = (t * r.stride + k) as isize - r.padding as isize;
                        if pos >= 0 && (pos as usize) < r.t_in {
                            let dst = pos as usize * r.c_in;
                            let src = t * span + k * r.c_in;
                            for c in 0..r.c_in {
                                gx[dst + c] += dcols[src + c];
                            }
                        }
                    }
                }
            }
        }
        Op::Lstm(r) => {
            let (n, steps) = (r.hidden, r.steps);
            let w = val(&r.w_hh);
            let mut dpre = vec![0.0; steps * 4 * n];
            let mut dw = vec![0.0; n * 4 * n];
            let mut dh = g.to_vec();
            let mut dc = vec![0.0; n];
            let mut dz = vec![0.0; 4 * n];
            for s in (0..steps).rev() {
                let a = &r.gates[s * 4 * n..(s + 1) * 4 * n];
                for j in 0..n {
                    let (i, f, cand, o) = (a[j], a[n + j], a[2 * n + j], a[3 * n + j]);
                    let tc = r.cells[s * n + j].tanh();
                    let c_prev = if s > 0 { r.cells[(s - 1) * n + j] } else { 0.0 };
                    let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
                    dz[j] = dcj * cand * i * (1.0 - i);
                    dz[n + j] = dcj * c_prev * f * (1.0 - f);
                    dz[2 * n + j] = dcj * i * (1.0 - cand * cand);
                    dz[3 * n + j] = dh[j] * tc * o * (1.0 - o);
                    dc[j] = dcj * f;
                }
                let t = if r.reverse { steps - 1 - s } else { s };
                dpre[t * 4 * n..(t + 1) * 4 * n].copy_from_slice(&dz);
                if s > 0 {
                    let h_prev = &r.states[(s - 1) * n..s * n];
                    for k in 0..n {
                        let row = k * 4 * n..(k + 1) * 4 * n;
                        let hk = h_prev[k];
                        let mut acc = 0.0;
                        for ((dwj, &wj), &dzj) in dw[row.clone()].iter_mut().zip(&w[row]).zip(&dz) {
                            *dwj += hk * dzj;
                            acc += dzj * wj;
                        }
                        dh[k] = acc;
                    }
                }
            }
            if wants(&r.pre) {
                for (acc, v) in slot!(r.pre).iter_mut().zip(&dpre) {
                    *acc += v;
                }
            }
            if wants(&r.w_hh) {
                for (acc, v) in slot!(r.w_hh).iter_mut().zip(&dw) {
                    *acc += v;
                }
            }
        }
    }
}
