//! Dense f64 tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] is rebuilt for every optimisation step. Leaves are created with
//! [`Graph::leaf`] (trainable) or [`Graph::constant`]; every op appends a node
//! whose parents have strictly smaller ids, so walking the node list backwards
//! is a valid reverse topological order.
//!
//! Tensors are row-major. Most kernels treat a tensor as a matrix of
//! `rows() x cols()` where `rows` is the leading dimension.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph; call zero_grad first")]
    BackwardTwice,
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid {
                op: "Tensor::new",
                msg: format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left one.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    /// rhs has a single element
    Scalar,
    /// rhs is `[cols]` / `[1, cols]`, repeated over rows
    Row,
    /// rhs is `[rows, 1]`, repeated over columns
    Col,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Relu(Var),
    Exp(Var),
    OneMinusExpNeg(Var),
    Softplus(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MaxCols(Var),
    L2Norm(Var),
    Matmul(Var, Var),
    Linear(Var, Var, Var),
    Softmax(Var, usize),
    Concat(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    PosEnc {
        x: Var,
        bands: usize,
        include_input: bool,
    },
    CumsumExclusive(Var),
    RowWeightedSum(Var, Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    ClipScale(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Dynamic computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_ran: bool,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[m x n] = alpha * op(a) * op(b) + beta * out`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: all slices are sized by the callers for the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = parents.iter().any(|&p| self.rg(p));
        Ok(self.push(value, op, rg))
    }

    /// Trainable leaf; its gradient is accumulated by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: &Tensor, trainable: bool) -> Var {
        self.push(value.clone(), Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_ran = false;
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        if ta.shape == tb.shape {
            return Ok(Bcast::Same);
        }
        if tb.len() == 1 {
            return Ok(Bcast::Scalar);
        }
        let (r, c) = (ta.rows(), ta.cols());
        if ta.shape.len() == 2 {
            if (tb.shape == [c] || tb.shape == [1, c]) && tb.len() == c {
                return Ok(Bcast::Row);
            }
            if tb.shape == [r, 1] {
                return Ok(Bcast::Col);
            }
        }
        Err(TensorError::ShapeMismatch {
            op,
            lhs: ta.shape.clone(),
            rhs: tb.shape.clone(),
        })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(name, a, b)?;
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let cols = ta.cols();
        let data: Vec<f64> = match bc {
            Bcast::Same => ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => {
                let y = tb.data[0];
                ta.data.iter().map(|&x| f(x, y)).collect()
            }
            Bcast::Row => ta
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data[i % cols]))
                .collect(),
            Bcast::Col => ta
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data[i / cols]))
                .collect(),
        };
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push_checked(name, value, mk(a, b, bc), &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.nodes[a.0].value.map(f);
        self.push_checked(name, value, op, &[a])
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

    /// Elementwise minimum of two same-shaped tensors.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "minimum",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| x.min(y)).collect(),
        };
        self.push_checked("minimum", value, Op::Minimum(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary("scale", a, |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + k, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// `1 - exp(-x)`, evaluated without cancellation.
    pub fn one_minus_exp_neg(&mut self, a: Var) -> Result<Var> {
        self.unary("one_minus_exp_neg", a, |x| -(-x).exp_m1(), Op::OneMinusExpNeg(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary("sin", a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary("cos", a, f64::cos, Op::Cos(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.is_empty() {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, c) = (t.rows(), t.cols());
        let data = (0..r).map(|i| t.data[i * c..(i + 1) * c].iter().sum()).collect();
        let value = Tensor {
            shape: vec![r, 1],
            data,
        };
        self.push_checked("sum_cols", value, Op::SumCols(a), &[a])
    }

    /// Row maxima: `[r, c] -> [r, 1]`. The gradient goes to the first maximiser.
    pub fn max_cols(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, c) = (t.rows(), t.cols());
        if c == 0 {
            return Err(TensorError::Invalid {
                op: "max_cols",
                msg: "no columns".into(),
            });
        }
        let data = (0..r)
            .map(|i| t.data[i * c..(i + 1) * c].iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let value = Tensor {
            shape: vec![r, 1],
            data,
        };
        self.push_checked("max_cols", value, Op::MaxCols(a), &[a])
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.norm_sq().sqrt();
        self.push_checked("l2_norm", Tensor::scalar(n), Op::L2Norm(a), &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, k as isize, 1, &tb.data, n as isize, 1, 0.0, &mut out);
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        self.push_checked("matmul", value, Op::Matmul(a, b), &[a, b])
    }

    /// Affine map `x W^T + b` with `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let tw = &self.nodes[w.0].value;
        let tb = &self.nodes[b.0].value;
        if tw.shape.len() != 2 || tx.cols() != tw.shape[1] || tb.len() != tw.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: tx.shape.clone(),
                rhs: tw.shape.clone(),
            });
        }
        let (n, i, o) = (tx.rows(), tw.shape[1], tw.shape[0]);
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(&tb.data);
        }
        // W^T as a strided view: element (k, j) of W^T is W[j, k].
        gemm(n, i, o, &tx.data, i as isize, 1, &tw.data, 1, i as isize, 1.0, &mut out);
        let value = Tensor {
            shape: vec![n, o],
            data: out,
        };
        self.push_checked("linear", value, Op::Linear(x, w, b), &[x, w, b])
    }

    /// Softmax of a 2-D tensor along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.shape.len() != 2 || axis > 1 {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("need a 2-D tensor and axis 0/1, got {:?} axis {}", t.shape, axis),
            });
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; r * c];
        let (outer, inner, so, si) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
        for o in 0..outer {
            let base = o * so;
            let mut mx = f64::NEG_INFINITY;
            for k in 0..inner {
                mx = mx.max(t.data[base + k * si]);
            }
            let mut z = 0.0;
            for k in 0..inner {
                let e = (t.data[base + k * si] - mx).exp();
                out[base + k * si] = e;
                z += e;
            }
            for k in 0..inner {
                out[base + k * si] /= z;
            }
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        self.push_checked("softmax", value, Op::Softmax(a, axis), &[a])
    }

    /// Column-wise concatenation of tensors sharing the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: t.shape.clone(),
                });
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor {
            shape: vec![rows, total],
            data: out,
        };
        self.push_checked("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, c) = (t.rows(), t.cols());
        if start >= end || end > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {}..{} out of {} columns", start, end, c),
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&t.data[i * c + start..i * c + end]);
        }
        let value = Tensor {
            shape: vec![r, w],
            data: out,
        };
        self.push_checked("slice_cols", value, Op::SliceCols(a, start, end), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshaped(shape.to_vec())?;
        self.push_checked("reshape", value, Op::Reshape(a), &[a])
    }

    /// Sinusoidal encoding of every column of `x: [n, d]`.
    ///
    /// Per input coordinate the output holds `[x?, sin(2^0 pi x), cos(2^0 pi x), ...,
    /// sin(2^(L-1) pi x), cos(2^(L-1) pi x)]`.
    pub fn posenc(&mut self, x: Var, bands: usize, include_input: bool) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (n, d) = (t.rows(), t.cols());
        let per = 2 * bands + include_input as usize;
        let mut out = Vec::with_capacity(n * d * per);
        for &v in &t.data {
            if include_input {
                out.push(v);
            }
            let mut f = std::f64::consts::PI;
            for _ in 0..bands {
                let (s, c) = (f * v).sin_cos();
                out.push(s);
                out.push(c);
                f *= 2.0;
            }
        }
        let value = Tensor {
            shape: vec![n, d * per],
            data: out,
        };
        self.push_checked(
            "posenc",
            value,
            Op::PosEnc {
                x,
                bands,
                include_input,
            },
            &[x],
        )
    }

    /// Exclusive prefix sum along each row: `y[r, j] = sum_{k<j} x[r, k]`.
    pub fn cumsum_exclusive(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let mut acc = 0.0;
            for j in 0..c {
                out[i * c + j] = acc;
                acc += t.data[i * c + j];
            }
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        self.push_checked("cumsum_exclusive", value, Op::CumsumExclusive(a), &[a])
    }

    /// `out[r, ch] = sum_m w[r, m] * v[r * M + m, ch]` for `w: [R, M]`, `v: [R*M, C]`.
    pub fn row_weighted_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let tw = &self.nodes[w.0].value;
        let tv = &self.nodes[v.0].value;
        let (r, m) = (tw.rows(), tw.cols());
        if tv.rows() != r * m {
            return Err(TensorError::ShapeMismatch {
                op: "row_weighted_sum",
                lhs: tw.shape.clone(),
                rhs: tv.shape.clone(),
            });
        }
        let ch = tv.cols();
        let mut out = vec![0.0; r * ch];
        for i in 0..r {
            for k in 0..m {
                let wk = tw.data[i * m + k];
                let row = &tv.data[(i * m + k) * ch..(i * m + k + 1) * ch];
                for (o, &x) in out[i * ch..(i + 1) * ch].iter_mut().zip(row) {
                    *o += wk * x;
                }
            }
        }
        let value = Tensor {
            shape: vec![r, ch],
            data: out,
        };
        self.push_checked("row_weighted_sum", value, Op::RowWeightedSum(w, v), &[w, v])
    }

    /// Selects rows by index (repetition allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {} out of {}", i, r),
                });
            }
            out.extend_from_slice(&t.data[i * c..(i + 1) * c]);
        }
        let value = Tensor {
            shape: vec![idx.len(), c],
            data: out,
        };
        self.push_checked("gather_rows", value, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Writes row `i` of `a` into row `idx[i]` of a zero tensor with `total` rows.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], total: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        if idx.len() != t.rows() {
            return Err(TensorError::Invalid {
                op: "scatter_rows",
                msg: format!("{} indices for {} rows", idx.len(), t.rows()),
            });
        }
        let mut out = vec![0.0; total * c];
        let mut seen = vec![false; total];
        for (k, &i) in idx.iter().enumerate() {
            if i >= total || seen[i] {
                return Err(TensorError::Invalid {
                    op: "scatter_rows",
                    msg: format!("index {} repeated or out of {}", i, total),
                });
            }
            seen[i] = true;
            out[i * c..(i + 1) * c].copy_from_slice(&t.data[k * c..(k + 1) * c]);
        }
        let value = Tensor {
            shape: vec![total, c],
            data: out,
        };
        self.push_checked("scatter_rows", value, Op::ScatterRows(a, idx.to_vec()), &[a])
    }

    /// Row scale factors `min(1, s / rowsum)` with `rowsum: [r, 1]`, `s` a single element.
    /// A zero row sum yields a factor of 1.
    pub fn clip_scale(&mut self, rowsum: Var, s: Var) -> Result<Var> {
        let tr = &self.nodes[rowsum.0].value;
        let ts = &self.nodes[s.0].value;
        if ts.len() != 1 || tr.cols() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "clip_scale",
                lhs: tr.shape.clone(),
                rhs: ts.shape.clone(),
            });
        }
        let sv = ts.data[0];
        let value = tr.map(|r| if r > 0.0 && sv < r { sv / r } else { 1.0 });
        self.push_checked("clip_scale", value, Op::ClipScale(rowsum, s), &[rowsum, s])
    }

    /// Reverse pass from a single-element `loss`; leaf gradients accumulate with `+=`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_ran {
            return Err(TensorError::BackwardTwice);
        }
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(TensorError::NotScalar(lt.shape.clone()));
        }
        self.backward_ran = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor {
            shape: lt.shape.clone(),
            data: vec![1.0],
        });
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn reduce_bcast(&self, g: &Tensor, target: Var, bc: Bcast) -> Tensor {
        let shape = self.nodes[target.0].value.shape.clone();
        match bc {
            Bcast::Same => g.clone(),
            Bcast::Scalar => Tensor {
                shape,
                data: vec![g.data.iter().sum()],
            },
            Bcast::Row => {
                let c = g.cols();
                let mut out = vec![0.0; c];
                for (i, v) in g.data.iter().enumerate() {
                    out[i % c] += v;
                }
                Tensor { shape, data: out }
            }
            Bcast::Col => {
                let c = g.cols();
                let out = g.data.chunks(c).map(|r| r.iter().sum()).collect();
                Tensor { shape, data: out }
            }
        }
    }

    fn expand_bcast(&self, b: Var, like: &Tensor, bc: Bcast) -> Vec<f64> {
        let tb = &self.nodes[b.0].value;
        let c = like.cols();
        match bc {
            Bcast::Same => tb.data.clone(),
            Bcast::Scalar => vec![tb.data[0]; like.len()],
            Bcast::Row => (0..like.len()).map(|i| tb.data[i % c]).collect(),
            Bcast::Col => (0..like.len()).map(|i| tb.data[i / c]).collect(),
        }
    }

    fn elementwise(&self, g: &Tensor, src: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let x = &self.nodes[src.0].value;
        Tensor {
            shape: x.shape.clone(),
            data: g.data.iter().zip(&x.data).map(|(&gi, &xi)| f(gi, xi)).collect(),
        }
    }

    fn propagate(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b, bc) => {
                if self.rg(b) {
                    let gb = self.reduce_bcast(&g, b, bc);
                    self.send(grads, b, gb);
                }
                self.send(grads, a, g);
            }
            &Op::Sub(a, b, bc) => {
                if self.rg(b) {
                    let gb = self.reduce_bcast(&g.map(|v| -v), b, bc);
                    self.send(grads, b, gb);
                }
                self.send(grads, a, g);
            }
            &Op::Mul(a, b, bc) => {
                let ta = &self.nodes[a.0].value;
                if self.rg(a) {
                    let bv = self.expand_bcast(b, ta, bc);
                    let ga = Tensor {
                        shape: ta.shape.clone(),
                        data: g.data.iter().zip(&bv).map(|(x, y)| x * y).collect(),
                    };
                    self.send(grads, a, ga);
                }
                if self.rg(b) {
                    let prod = Tensor {
                        shape: ta.shape.clone(),
                        data: g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect(),
                    };
                    let gb = self.reduce_bcast(&prod, b, bc);
                    self.send(grads, b, gb);
                }
            }
            &Op::Minimum(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                // ties route the gradient to the left operand
                let pick_a: Vec<bool> = ta.data.iter().zip(&tb.data).map(|(x, y)| x <= y).collect();
                if self.rg(a) {
                    let ga = Tensor {
                        shape: ta.shape.clone(),
                        data: g.data.iter().zip(&pick_a).map(|(&v, &p)| if p { v } else { 0.0 }).collect(),
                    };
                    self.send(grads, a, ga);
                }
                if self.rg(b) {
                    let gb = Tensor {
                        shape: tb.shape.clone(),
                        data: g.data.iter().zip(&pick_a).map(|(&v, &p)| if p { 0.0 } else { v }).collect(),
                    };
                    self.send(grads, b, gb);
                }
            }
            &Op::Scale(a, k) => self.send(grads, a, g.map(|v| k * v)),
            &Op::AddScalar(a) => self.send(grads, a, g),
            &Op::Neg(a) => self.send(grads, a, g.map(|v| -v)),
            &Op::Relu(a) => {
                let ga = self.elementwise(&g, a, |gi, x| if x > 0.0 { gi } else { 0.0 });
                self.send(grads, a, ga);
            }
            &Op::Exp(a) => {
                let ga = Tensor {
                    shape: out.shape.clone(),
                    data: g.data.iter().zip(&out.data).map(|(gi, y)| gi * y).collect(),
                };
                self.send(grads, a, ga);
            }
            &Op::OneMinusExpNeg(a) => {
                let ga = self.elementwise(&g, a, |gi, x| gi * (-x).exp());
                self.send(grads, a, ga);
            }
            &Op::Softplus(a) => {
                let ga = self.elementwise(&g, a, |gi, x| gi * sigmoid(x));
                self.send(grads, a, ga);
            }
            &Op::Sigmoid(a) => {
                let ga = Tensor {
                    shape: out.shape.clone(),
                    data: g.data.iter().zip(&out.data).map(|(gi, y)| gi * y * (1.0 - y)).collect(),
                };
                self.send(grads, a, ga);
            }
            &Op::Sin(a) => {
                let ga = self.elementwise(&g, a, |gi, x| gi * x.cos());
                self.send(grads, a, ga);
            }
            &Op::Cos(a) => {
                let ga = self.elementwise(&g, a, |gi, x| -gi * x.sin());
                self.send(grads, a, ga);
            }
            &Op::Abs(a) => {
                let ga = self.elementwise(&g, a, |gi, x| {
                    if x > 0.0 {
                        gi
                    } else if x < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                self.send(grads, a, ga);
            }
            &Op::Square(a) => {
                let ga = self.elementwise(&g, a, |gi, x| 2.0 * gi * x);
                self.send(grads, a, ga);
            }
            &Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                self.send(grads, a, Tensor::full(&shape, g.data[0]));
            }
            &Op::Mean(a) => {
                let shape = self.shape(a).to_vec();
                let n = self.nodes[a.0].value.len() as f64;
                self.send(grads, a, Tensor::full(&shape, g.data[0] / n));
            }
            &Op::SumCols(a) => {
                let ta = &self.nodes[a.0].value;
                let c = ta.cols();
                let data = (0..ta.len()).map(|k| g.data[k / c]).collect();
                self.send(
                    grads,
                    a,
                    Tensor {
                        shape: ta.shape.clone(),
                        data,
                    },
                );
            }
            &Op::MaxCols(a) => {
                let ta = &self.nodes[a.0].value;
                let c = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                for i in 0..ta.rows() {
                    let row = &ta.data[i * c..(i + 1) * c];
                    let arg = row.iter().position(|&v| v == out.data[i]).unwrap_or(0);
                    ga[i * c + arg] = g.data[i];
                }
                self.send(
                    grads,
                    a,
                    Tensor {
                        shape: ta.shape.clone(),
                        data: ga,
                    },
                );
            }
            &Op::L2Norm(a) => {
                let n = out.data[0];
                let ga = if n > 0.0 {
                    self.nodes[a.0].value.map(|x| g.data[0] * x / n)
                } else {
                    Tensor::zeros(self.shape(a))
                };
                self.send(grads, a, ga);
            }
            &Op::Matmul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.rg(a) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g.data, n as isize, 1, &tb.data, 1, n as isize, 0.0, &mut da);
                    self.send(
                        grads,
                        a,
                        Tensor {
                            shape: ta.shape.clone(),
                            data: da,
                        },
                    );
                }
                if self.rg(b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &ta.data, 1, k as isize, &g.data, n as isize, 1, 0.0, &mut db);
                    self.send(
                        grads,
                        b,
                        Tensor {
                            shape: tb.shape.clone(),
                            data: db,
                        },
                    );
                }
            }
            &Op::Linear(x, w, b) => {
                let tx = &self.nodes[x.0].value;
                let tw = &self.nodes[w.0].value;
                let (n, i, o) = (tx.rows(), tw.shape[1], tw.shape[0]);
                if self.rg(x) {
                    // dX = G W
                    let mut dx = vec![0.0; n * i];
                    gemm(n, o, i, &g.data, o as isize, 1, &tw.data, i as isize, 1, 0.0, &mut dx);
                    self.send(
                        grads,
                        x,
                        Tensor {
                            shape: tx.shape.clone(),
                            data: dx,
                        },
                    );
                }
                if self.rg(w) {
                    // dW = G^T X
                    let mut dw = vec![0.0; o * i];
                    gemm(o, n, i, &g.data, 1, o as isize, &tx.data, i as isize, 1, 0.0, &mut dw);
                    self.send(
                        grads,
                        w,
                        Tensor {
                            shape: tw.shape.clone(),
                            data: dw,
                        },
                    );
                }
                if self.rg(b) {
                    let mut db = vec![0.0; o];
                    for row in g.data.chunks(o) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.shape(b).to_vec();
                    self.send(grads, b, Tensor { shape, data: db });
                }
            }
            &Op::Softmax(a, axis) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                let mut ga = vec![0.0; r * c];
                let (outer, inner, so, si) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                for o in 0..outer {
                    let base = o * so;
                    let dot: f64 = (0..inner).map(|k| g.data[base + k * si] * out.data[base + k * si]).sum();
                    for k in 0..inner {
                        let idx = base + k * si;
                        ga[idx] = out.data[idx] * (g.data[idx] - dot);
                    }
                }
                self.send(
                    grads,
                    a,
                    Tensor {
                        shape: out.shape.clone(),
                        data: ga,
                    },
                );
            }
            Op::Concat(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let tp = &self.nodes[p.0].value;
                    let w = tp.cols();
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data[r * total + offset..r * total + offset + w]);
                        }
                        self.send(
                            grads,
                            p,
                            Tensor {
                                shape: tp.shape.clone(),
                                data: gp,
                            },
                        );
                    }
                    offset += w;
                }
            }
            &Op::SliceCols(a, start, end) => {
                let ta = &self.nodes[a.0].value;
                let c = ta.cols();
                let w = end - start;
                let mut ga = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    ga[r * c + start..r * c + end].copy_from_slice(&g.data[r * w..(r + 1) * w]);
                }
                self.send(
                    grads,
                    a,
                    Tensor {
                        shape: ta.shape.clone(),
                        data: ga,
                    },
                );
            }
            &Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                self.send(grads, a, Tensor { shape, data: g.data });
            }
            &Op::PosEnc {
                x,
                bands,
                include_input,
            } => {
                let tx = &self.nodes[x.0].value;
                let per = 2 * bands + include_input as usize;
                let mut gx = vec![0.0; tx.len()];
                for k in 0..tx.len() {
                    let gs = &g.data[k * per..(k + 1) * per];
                    let os = &out.data[k * per..(k + 1) * per];
                    let mut acc = 0.0;
                    let mut off = 0;
                    if include_input {
                        acc += gs[0];
                        off = 1;
                    }
                    let mut f = std::f64::consts::PI;
                    for l in 0..bands {
                        let (s, c) = (os[off + 2 * l], os[off + 2 * l + 1]);
                        acc += f * (c * gs[off + 2 * l] - s * gs[off + 2 * l + 1]);
                        f *= 2.0;
                    }
                    gx[k] = acc;
                }
                self.send(
                    grads,
                    x,
                    Tensor {
                        shape: tx.shape.clone(),
                        data: gx,
                    },
                );
            }
            &Op::CumsumExclusive(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let mut acc = 0.0;
                    for j in (0..c).rev() {
                        ga[i * c + j] = acc;
                        acc += g.data[i * c + j];
                    }
                }
                self.send(
                    grads,
                    a,
                    Tensor {
                        shape: out.shape.clone(),
                        data: ga,
                    },
                );
            }
            &Op::RowWeightedSum(w, v) => {
                let tw = &self.nodes[w.0].value;
                let tv = &self.nodes[v.0].value;
                let (r, m) = (tw.rows(), tw.cols());
                let ch = tv.cols();
                if self.rg(w) {
                    let mut gw = vec![0.0; r * m];
                    for i in 0..r {
                        let go = &g.data[i * ch..(i + 1) * ch];
                        for k in 0..m {
                            let row = &tv.data[(i * m + k) * ch..(i * m + k + 1) * ch];
                            gw[i * m + k] = go.iter().zip(row).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.send(
                        grads,
                        w,
                        Tensor {
                            shape: tw.shape.clone(),
                            data: gw,
                        },
                    );
                }
                if self.rg(v) {
                    let mut gv = vec![0.0; tv.len()];
                    for i in 0..r {
                        let go = &g.data[i * ch..(i + 1) * ch];
                        for k in 0..m {
                            let wk = tw.data[i * m + k];
                            for (d, &x) in gv[(i * m + k) * ch..(i * m + k + 1) * ch].iter_mut().zip(go) {
                                *d = wk * x;
                            }
                        }
                    }
                    self.send(
                        grads,
                        v,
                        Tensor {
                            shape: tv.shape.clone(),
                            data: gv,
                        },
                    );
                }
            }
            Op::GatherRows(a, idx) => {
                let ta = &self.nodes[a.0].value;
                let c = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for (d, v) in ga[i * c..(i + 1) * c].iter_mut().zip(&g.data[k * c..(k + 1) * c]) {
                        *d += v;
                    }
                }
                self.send(
                    grads,
                    *a,
                    Tensor {
                        shape: ta.shape.clone(),
                        data: ga,
                    },
                );
            }
            Op::ScatterRows(a, idx) => {
                let ta = &self.nodes[a.0].value;
                let c = ta.cols();
                let mut ga = Vec::with_capacity(ta.len());
                for &i in idx {
                    ga.extend_from_slice(&g.data[i * c..(i + 1) * c]);
                }
                self.send(
                    grads,
                    *a,
                    Tensor {
                        shape: ta.shape.clone(),
                        data: ga,
                    },
                );
            }
            &Op::ClipScale(rowsum, s) => {
                let tr = &self.nodes[rowsum.0].value;
                let sv = self.nodes[s.0].value.data[0];
                let active: Vec<bool> = tr.data.iter().map(|&r| r > 0.0 && sv < r).collect();
                if self.rg(rowsum) {
                    let gr = Tensor {
                        shape: tr.shape.clone(),
                        data: tr
                            .data
                            .iter()
                            .zip(&g.data)
                            .zip(&active)
                            .map(|((&r, &gi), &on)| if on { -gi * sv / (r * r) } else { 0.0 })
                            .collect(),
                    };
                    self.send(grads, rowsum, gr);
                }
                if self.rg(s) {
                    let gs: f64 = tr
                        .data
                        .iter()
                        .zip(&g.data)
                        .zip(&active)
                        .map(|((&r, &gi), &on)| if on { gi / r } else { 0.0 })
                        .sum();
                    let shape = self.shape(s).to_vec();
                    self.send(grads, s, Tensor { shape, data: vec![gs] });
                }
            }
        }
    }
}

/// Largest coordinate-wise `|analytic - numeric| / max(1, |numeric|)` for a scalar
/// function of one tensor, using central differences with step `h`.
pub fn grad_check<F, E>(f: F, x: &Tensor, h: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph, Var) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |t: Tensor| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        Ok(g.value(y).item())
    };
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let mut plus = x.clone();
        plus.data[k] += h;
        let mut minus = x.clone();
        minus.data[k] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data[k] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softplus_of_zero_is_ln2() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.softplus(x).unwrap();
        assert!((g.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softmax_uniform_and_simplex() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(random(&[5, 4], 3).reshaped(vec![5, 4]).unwrap());
        for axis in [0, 1] {
            let y = g.softmax(x, axis).unwrap();
            let t = g.value(y).clone();
            let (r, c) = (5, 4);
            if axis == 1 {
                for i in 0..r {
                    let s: f64 = t.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            } else {
                for j in 0..c {
                    let s: f64 = (0..r).map(|i| t.data()[i * c + j]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
            assert!(t.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_parameter_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let p = g.leaf(Tensor::vector(vec![3.0]));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        let gp = g.grad(p).cloned().unwrap_or_else(|| Tensor::zeros(&[1]));
        assert_eq!(gp.data(), &[0.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(g.backward(x), Err(TensorError::NotScalar(vec![2])));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(TensorError::BackwardTwice));
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_and_non_finite_are_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(g.matmul(a, a), Err(TensorError::ShapeMismatch { .. })));
        let big = g.constant(Tensor::scalar(1000.0));
        assert_eq!(g.exp(big), Err(TensorError::NonFinite { op: "exp" }));
    }

    #[test]
    fn gradient_accumulation_is_linear() {
        let x0 = random(&[3, 2], 11);
        let f1 = |g: &mut Graph, x: Var| -> Result<Var> {
            let s = g.sin(x)?;
            g.sum(s)
        };
        let f2 = |g: &mut Graph, x: Var| -> Result<Var> {
            let e = g.exp(x)?;
            let q = g.square(e)?;
            g.mean(q)
        };
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let a = f1(&mut g, x).unwrap();
        let b = f2(&mut g, x).unwrap();
        let s = g.add(a, b).unwrap();
        g.backward(s).unwrap();
        let joint = g.grad(x).unwrap().clone();
        g.zero_grad();
        g.backward(a).unwrap();
        let ga = g.grad(x).unwrap().clone();
        g.zero_grad();
        g.backward(b).unwrap();
        let gb = g.grad(x).unwrap().clone();
        for k in 0..joint.len() {
            assert!((joint.data()[k] - ga.data()[k] - gb.data()[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn grad_check_sin_and_constant() {
        let x = random(&[4, 3], 5);
        let e = grad_check(
            |g, x| {
                let s = g.sin(x)?;
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-7, "{e}");
        let e = grad_check(
            |g, _x| -> Result<Var> {
                let c = g.constant(Tensor::scalar(4.0));
                Ok(c)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn clip_scale_zero_row_is_identity() {
        let mut g = Graph::new();
        let r = g.leaf(Tensor::matrix(2, 1, vec![0.0, 4.0]).unwrap());
        let s = g.leaf(Tensor::scalar(2.0));
        let f = g.clip_scale(r, s).unwrap();
        assert_eq!(g.value(f).data(), &[1.0, 0.5]);
    }
}
