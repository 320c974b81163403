//! Dense row-major `f64` tensors and a reverse-mode autodiff tape.
//!
//! A [`Tape`] records every forward operation as a node holding its output
//! buffer. [`Tape::backward`] walks the nodes once in reverse and leaves
//! gradients on every leaf that was registered with `requires_grad`.
//!
//! Broadcasting is limited to scalar operands; bias rows are spread with
//! [`Tape::expand_rows`] so every gradient rule stays a plain loop.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch, {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range 0..{bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Contract(format!(
                "shape {shape:?} has a zero extent"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SeedStream) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.normal() * std).collect(),
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {:?} tensor", self.shape);
        self.data[0]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    /// Little-endian raw buffer, the on-disk form used by checkpoints.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(TensorError::Contract(format!(
                "raw buffer length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::new(shape, data)
    }
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Geometry of a batched multi-head attention call: `seqs` sequences of
/// `len` positions each, stacked row-wise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub seqs: usize,
    pub len: usize,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Softplus(usize),
    Tanh(usize),
    Gelu(usize),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    ExpandRows(usize),
    Reshape(usize),
    SelectRows {
        x: usize,
        rows: Vec<usize>,
    },
    SelectCols {
        x: usize,
        cols: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    SoftmaxCe {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Single-threaded operation recorder. Independent tapes never share state.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// (1 + tanh(u)) / 2 == sigmoid(2u), which costs a single exp.
#[inline]
fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp())
}

#[inline]
fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub mod scalar {
    //! Plain `f64` versions of the pointwise kernels, shared with callers that
    //! do not need a tape.
    pub fn sigmoid(x: f64) -> f64 {
        super::sigmoid(x)
    }
    pub fn softplus(x: f64) -> f64 {
        super::softplus(x)
    }
    pub fn gelu(x: f64) -> f64 {
        super::gelu(x)
    }
}

/// `c = a·b + beta·c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!((m - 1) * rsc + (n - 1) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::Contract(
                "variable belongs to a different tape".into(),
            ));
        }
        Ok(v.idx)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var { tape: self.id, idx }
    }

    fn finish(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var> {
        check_finite(name, &value)?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(shape, value, op, needs_grad))
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.idx];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.idx].value[0]
    }

    fn dims2(&self, op: &'static str, i: usize) -> Result<(usize, usize)> {
        match self.nodes[i].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.dims2("matmul", ai)?;
        let (k2, n) = self.dims2("matmul", bi)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[ai].value,
            k,
            1,
            &self.nodes[bi].value,
            n,
            1,
            0.0,
            &mut out,
            n,
        );
        self.finish("matmul", vec![m, n], out, Op::MatMul(ai, bi), &[ai, bi])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>, usize, usize)> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (na, nb) = (&self.nodes[ai], &self.nodes[bi]);
        let (la, lb) = (na.value.len(), nb.value.len());
        let shape = if la == lb && (na.shape == nb.shape || la == 1) {
            na.shape.clone()
        } else if lb == 1 {
            na.shape.clone()
        } else if la == 1 {
            nb.shape.clone()
        } else {
            return Err(TensorError::Shape {
                op: name,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        };
        let n = la.max(lb);
        let (va, vb) = (&na.value, &nb.value);
        let out = (0..n)
            .map(|i| f(va[if la == 1 { 0 } else { i }], vb[if lb == 1 { 0 } else { i }]))
            .collect();
        Ok((shape, out, ai, bi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, ai, bi) = self.binary("add", a, b, |x, y| x + y)?;
        self.finish("add", s, v, Op::Add(ai, bi), &[ai, bi])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, ai, bi) = self.binary("sub", a, b, |x, y| x - y)?;
        self.finish("sub", s, v, Op::Sub(ai, bi), &[ai, bi])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, ai, bi) = self.binary("mul", a, b, |x, y| x * y)?;
        self.finish("mul", s, v, Op::Mul(ai, bi), &[ai, bi])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let bi = self.check(b)?;
        if self.nodes[bi].value.contains(&0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let (s, v, ai, bi) = self.binary("div", a, b, |x, y| x / y)?;
        self.finish("div", s, v, Op::Div(ai, bi), &[ai, bi])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Result<(Vec<usize>, Vec<f64>, usize)> {
        let ai = self.check(a)?;
        let n = &self.nodes[ai];
        Ok((n.shape.clone(), n.value.iter().map(|&x| f(x)).collect(), ai))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let (s, v, ai) = self.unary(a, |x| x * c)?;
        self.finish("scale", s, v, Op::Scale(ai, c), &[ai])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let (s, v, ai) = self.unary(a, |x| x + c)?;
        self.finish("add_scalar", s, v, Op::AddScalar(ai), &[ai])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (s, v, ai) = self.unary(a, sigmoid)?;
        self.finish("sigmoid", s, v, Op::Sigmoid(ai), &[ai])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let (s, v, ai) = self.unary(a, softplus)?;
        self.finish("softplus", s, v, Op::Softplus(ai), &[ai])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let (s, v, ai) = self.unary(a, f64::tanh)?;
        self.finish("tanh", s, v, Op::Tanh(ai), &[ai])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (s, v, ai) = self.unary(a, gelu)?;
        self.finish("gelu", s, v, Op::Gelu(ai), &[ai])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        if let Some(&bad) = self.nodes[ai].value.iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("argument {bad} <= 0"),
            });
        }
        let (s, v, ai) = self.unary(a, f64::ln)?;
        self.finish("log", s, v, Op::Log(ai), &[ai])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let (s, v, ai) = self.unary(a, f64::exp)?;
        self.finish("exp", s, v, Op::Exp(ai), &[ai])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        if let Some(&bad) = self.nodes[ai].value.iter().find(|&&x| x < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("argument {bad} < 0"),
            });
        }
        let (s, v, ai) = self.unary(a, f64::sqrt)?;
        self.finish("sqrt", s, v, Op::Sqrt(ai), &[ai])
    }

    /// `log(sigmoid(x))`, computed as `-softplus(-x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        let sp = self.softplus(n)?;
        self.neg(sp)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s: f64 = self.nodes[ai].value.iter().sum();
        self.finish("sum", vec![], vec![s], Op::Sum(ai), &[ai])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let v = &self.nodes[ai].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.finish("mean", vec![], vec![m], Op::Mean(ai), &[ai])
    }

    /// Repeats a length-`d` vector (or `1×d` row) as `n` rows.
    pub fn expand_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let d = match self.nodes[ai].shape.as_slice() {
            [d] | [1, d] => *d,
            s => {
                return Err(TensorError::Shape {
                    op: "expand_rows",
                    lhs: s.to_vec(),
                    rhs: vec![1, 0],
                })
            }
        };
        let src = &self.nodes[ai].value;
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        self.finish("expand_rows", vec![n, d], out, Op::ExpandRows(ai), &[ai])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let n: usize = shape.iter().product();
        if n != self.nodes[ai].value.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.nodes[ai].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let v = self.nodes[ai].value.clone();
        self.finish("reshape", shape.to_vec(), v, Op::Reshape(ai), &[ai])
    }

    /// Row gather; doubles as embedding lookup.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let (r, c) = self.dims2("select_rows", ai)?;
        let src = &self.nodes[ai].value;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(TensorError::Index {
                    op: "select_rows",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        if rows.is_empty() {
            return Err(TensorError::Contract("select_rows with no rows".into()));
        }
        self.finish(
            "select_rows",
            vec![rows.len(), c],
            out,
            Op::SelectRows {
                x: ai,
                rows: rows.to_vec(),
            },
            &[ai],
        )
    }

    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let (r, c) = self.dims2("select_cols", ai)?;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(TensorError::Index {
                op: "select_cols",
                index: bad,
                bound: c,
            });
        }
        if cols.is_empty() {
            return Err(TensorError::Contract("select_cols with no columns".into()));
        }
        let src = &self.nodes[ai].value;
        let mut out = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            for &j in cols {
                out.push(src[i * c + j]);
            }
        }
        self.finish(
            "select_cols",
            vec![r, cols.len()],
            out,
            Op::SelectCols {
                x: ai,
                cols: cols.to_vec(),
            },
            &[ai],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_rows of nothing".into()));
        }
        let mut idxs = Vec::with_capacity(parts.len());
        let mut rows = 0;
        let mut cols = None;
        for &p in parts {
            let i = self.check(p)?;
            let (r, c) = self.dims2("concat_rows", i)?;
            match cols {
                None => cols = Some(c),
                Some(c0) if c0 != c => {
                    return Err(TensorError::Shape {
                        op: "concat_rows",
                        lhs: vec![rows, c0],
                        rhs: vec![r, c],
                    })
                }
                _ => {}
            }
            rows += r;
            idxs.push(i);
        }
        let cols = cols.unwrap_or(0);
        let mut out = Vec::with_capacity(rows * cols);
        for &i in &idxs {
            out.extend_from_slice(&self.nodes[i].value);
        }
        let inputs = idxs.clone();
        self.finish("concat_rows", vec![rows, cols], out, Op::ConcatRows(idxs), &inputs)
    }

    /// Normalizes each row over the last dimension, then applies `gain` and
    /// `bias` (both length `d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        if eps <= 0.0 {
            return Err(TensorError::Contract("layer_norm eps must be positive".into()));
        }
        let shape = self.nodes[xi].shape.clone();
        let d = *shape.last().ok_or_else(|| TensorError::Shape {
            op: "layer_norm",
            lhs: vec![],
            rhs: vec![],
        })?;
        for &p in &[gi, bi] {
            if self.nodes[p].value.len() != d {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.nodes[p].shape.clone(),
                });
            }
        }
        let xs = &self.nodes[xi].value;
        let (g, b) = (&self.nodes[gi].value, &self.nodes[bi].value);
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.finish(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                xhat,
                rstd,
            },
            &[xi, gi, bi],
        )
    }

    /// Scaled dot-product attention for stacked sequences. `q`, `k`, `v` are
    /// `(seqs·len)×d`; heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let (qi, ki, vi) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (rows, d) = self.dims2("attention", qi)?;
        for &i in &[ki, vi] {
            if self.nodes[i].shape != self.nodes[qi].shape {
                return Err(TensorError::Shape {
                    op: "attention",
                    lhs: self.nodes[qi].shape.clone(),
                    rhs: self.nodes[i].shape.clone(),
                });
            }
        }
        let AttnLayout {
            seqs,
            len,
            heads,
            causal,
        } = layout;
        if seqs * len != rows || heads == 0 || d % heads != 0 {
            return Err(TensorError::Contract(format!(
                "attention layout {layout:?} does not fit a {rows}x{d} input"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (&self.nodes[qi].value, &self.nodes[ki].value, &self.nodes[vi].value);
        let mut probs = vec![0.0; seqs * heads * len * len];
        let mut out = vec![0.0; rows * d];
        for s in 0..seqs {
            for h in 0..heads {
                let base = s * len * d + h * dh;
                let p = &mut probs[(s * heads + h) * len * len..][..len * len];
                gemm(len, dh, len, &qv[base..], d, 1, &kv[base..], 1, d, 0.0, p, len);
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    let lim = if causal { i + 1 } else { len };
                    let mut mx = f64::NEG_INFINITY;
                    for x in row[..lim].iter_mut() {
                        *x *= scale;
                        mx = mx.max(*x);
                    }
                    let mut z = 0.0;
                    for x in row[..lim].iter_mut() {
                        *x = (*x - mx).exp();
                        z += *x;
                    }
                    for x in row[..lim].iter_mut() {
                        *x /= z;
                    }
                    for x in row[lim..].iter_mut() {
                        *x = 0.0;
                    }
                }
                gemm(len, len, dh, p, len, 1, &vv[base..], d, 1, 0.0, &mut out[base..], d);
            }
        }
        self.finish(
            "attention",
            vec![rows, d],
            out,
            Op::Attention {
                q: qi,
                k: ki,
                v: vi,
                layout,
                probs,
            },
            &[qi, ki, vi],
        )
    }

    /// Every attention node recorded so far, in recording order.
    pub fn attention_vars(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Attention { .. }))
            .map(|(idx, _)| Var { tape: self.id, idx })
            .collect()
    }

    /// Attention weights of an attention node, laid out
    /// `[seq][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes.get(v.idx)?.op {
            Op::Attention { probs, .. } if v.tape == self.id => Some(probs),
            _ => None,
        }
    }

    /// Mean over rows of `-log softmax(logits)[target]`, stabilized by
    /// subtracting the row maximum.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let (n, vocab) = self.dims2("softmax_ce", li)?;
        if targets.len() != n {
            return Err(TensorError::Shape {
                op: "softmax_ce",
                lhs: vec![n, vocab],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::Index {
                op: "softmax_ce",
                index: bad,
                bound: vocab,
            });
        }
        let z = &self.nodes[li].value;
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        for i in 0..n {
            let row = &z[i * vocab..(i + 1) * vocab];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                probs[i * vocab + j] = e;
                s += e;
            }
            for p in &mut probs[i * vocab..(i + 1) * vocab] {
                *p /= s;
            }
            total += mx + s.ln() - row[targets[i]];
        }
        let loss = total / n as f64;
        self.finish(
            "softmax_ce",
            vec![],
            vec![loss],
            Op::SoftmaxCe {
                logits: li,
                targets: targets.to_vec(),
                probs,
            },
            &[li],
        )
    }

    /// Reverse pass from a scalar loss. Leaves registered with
    /// `requires_grad` receive gradients readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if self.backward_done {
            return Err(TensorError::Contract(
                "backward called twice without reset".into(),
            ));
        }
        if self.nodes[li].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].shape
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[li].needs_grad {
            grads[li] = Some(vec![1.0]);
        }
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (target, contrib) in self.node_vjp(i, &g) {
                if !self.nodes[target].needs_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`]; `None` for detached
    /// leaves or values the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if v.tape != self.id {
            return None;
        }
        let g = self.grads.get(v.idx)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.idx].shape.clone(),
            data: g.clone(),
        })
    }

    /// Moves a leaf gradient out of the tape.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get_mut(v.idx)?.take()
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn node_vjp(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |j: usize| -> &[f64] { &self.nodes[j].value };
        let want = |j: usize| self.nodes[j].needs_grad;
        // Gradient for an operand that may be a broadcast scalar.
        let reduce = |j: usize, full: Vec<f64>| -> Vec<f64> {
            if self.nodes[j].value.len() == 1 && full.len() != 1 {
                vec![full.iter().sum()]
            } else {
                full
            }
        };
        let pick = |v: &[f64], k: usize| if v.len() == 1 { v[0] } else { v[k] };
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if want(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, n, 1, val(*b), 1, n, 0.0, &mut da, k);
                    out.push((*a, da));
                }
                if want(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), 1, k, g, n, 1, 0.0, &mut db, n);
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, reduce(*a, g.to_vec())));
                out.push((*b, reduce(*b, g.to_vec())));
            }
            Op::Sub(a, b) => {
                out.push((*a, reduce(*a, g.to_vec())));
                out.push((*b, reduce(*b, g.iter().map(|x| -x).collect())));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if want(*a) {
                    let da = g.iter().enumerate().map(|(k, x)| x * pick(vb, k)).collect();
                    out.push((*a, reduce(*a, da)));
                }
                if want(*b) {
                    let db = g.iter().enumerate().map(|(k, x)| x * pick(va, k)).collect();
                    out.push((*b, reduce(*b, db)));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if want(*a) {
                    let da = g.iter().enumerate().map(|(k, x)| x / pick(vb, k)).collect();
                    out.push((*a, reduce(*a, da)));
                }
                if want(*b) {
                    let db = g
                        .iter()
                        .enumerate()
                        .map(|(k, x)| {
                            let d = pick(vb, k);
                            -x * pick(va, k) / (d * d)
                        })
                        .collect();
                    out.push((*b, reduce(*b, db)));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|x| x * c).collect())),
            Op::AddScalar(a) => out.push((*a, g.to_vec())),
            Op::Sigmoid(a) => out.push((
                *a,
                g.iter().zip(&node.value).map(|(x, s)| x * s * (1.0 - s)).collect(),
            )),
            Op::Softplus(a) => out.push((
                *a,
                g.iter().zip(val(*a)).map(|(x, &u)| x * sigmoid(u)).collect(),
            )),
            Op::Tanh(a) => out.push((
                *a,
                g.iter().zip(&node.value).map(|(x, t)| x * (1.0 - t * t)).collect(),
            )),
            Op::Gelu(a) => out.push((
                *a,
                g.iter().zip(val(*a)).map(|(x, &u)| x * gelu_grad(u)).collect(),
            )),
            Op::Log(a) => out.push((*a, g.iter().zip(val(*a)).map(|(x, u)| x / u).collect())),
            Op::Exp(a) => out.push((*a, g.iter().zip(&node.value).map(|(x, e)| x * e).collect())),
            Op::Sqrt(a) => out.push((
                *a,
                g.iter().zip(&node.value).map(|(x, r)| x * 0.5 / r).collect(),
            )),
            Op::Sum(a) => out.push((*a, vec![g[0]; val(*a).len()])),
            Op::Mean(a) => {
                let n = val(*a).len();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::ExpandRows(a) => {
                let d = val(*a).len();
                let mut da = vec![0.0; d];
                for row in g.chunks_exact(d) {
                    for (acc, x) in da.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                out.push((*a, da));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::SelectRows { x, rows } => {
                let c = self.nodes[*x].shape[1];
                let mut dx = vec![0.0; val(*x).len()];
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += g[r * c + j];
                    }
                }
                out.push((*x, dx));
            }
            Op::SelectCols { x, cols } => {
                let c = self.nodes[*x].shape[1];
                let w = cols.len();
                let mut dx = vec![0.0; val(*x).len()];
                for (r, row) in g.chunks_exact(w).enumerate() {
                    for (k, &j) in cols.iter().enumerate() {
                        dx[r * c + j] += row[k];
                    }
                }
                out.push((*x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    out.push((p, g[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = val(*gain).len();
                let gv = val(*gain);
                let mut dx = vec![0.0; xhat.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hr[j];
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rs * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
                out.push((*x, dx));
                out.push((*gain, dg));
                out.push((*bias, db));
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let d = self.nodes[*q].shape[1];
                let AttnLayout { seqs, len, heads, .. } = *layout;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; len * len];
                for s in 0..seqs {
                    for h in 0..heads {
                        let base = s * len * d + h * dh;
                        let p = &probs[(s * heads + h) * len * len..][..len * len];
                        gemm(len, len, dh, p, 1, len, &g[base..], d, 1, 1.0, &mut dv[base..], d);
                        gemm(len, dh, len, &g[base..], d, 1, &vv[base..], 1, d, 0.0, &mut dp, len);
                        for i in 0..len {
                            let pr = &p[i * len..(i + 1) * len];
                            let dr = &mut dp[i * len..(i + 1) * len];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (x, &pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot) * scale;
                            }
                        }
                        gemm(len, len, dh, &dp, len, 1, &kv[base..], d, 1, 1.0, &mut dq[base..], d);
                        gemm(len, len, dh, &dp, 1, len, &qv[base..], d, 1, 1.0, &mut dk[base..], d);
                    }
                }
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let vocab = probs.len() / n;
                let c = g[0] / n as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * c).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dz[i * vocab + t] -= c;
                }
                out.push((*logits, dz));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::eye(2));
        let b = tape.constant(&Tensor::eye(2));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y), Tensor::eye(2).data());
    }

    #[test]
    fn small_matmul_by_hand() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&t(&[2, 1], &[0.0, 1.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 1]);
        assert_eq!(tape.value(y), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(TensorError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn pointwise_values() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        let sp = tape.softplus(z).unwrap();
        assert_eq!(tape.item(s), 0.5);
        assert!((tape.item(sp) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn exp_overflow_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::scalar(1e4));
        assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let s = tape.constant(&Tensor::scalar(1.5));
        let y = tape.add(a, s).unwrap();
        assert_eq!(tape.value(y), &[1.5; 6]);
        let b = tape.constant(&Tensor::zeros(&[3]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn uniform_cross_entropy() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(&[3, 8]));
        let l = tape.softmax_ce(z, &[0, 3, 7]).unwrap();
        assert!((tape.item(l) - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_cross_entropy() {
        let mut tape = Tape::new();
        let mut logits = Tensor::zeros(&[1, 5]);
        logits.data_mut()[2] = 20.0;
        let z = tape.constant(&logits);
        let l = tape.softmax_ce(z, &[2]).unwrap();
        assert!(tape.item(l) < 1e-8);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(&[1, 4]));
        assert!(matches!(
            tape.softmax_ce(z, &[4]),
            Err(TensorError::Index { index: 4, bound: 4, .. })
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1, 5], 3.0));
        let g = tape.constant(&Tensor::full(&[5], 1.0));
        let b = tape.constant(&Tensor::zeros(&[5]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_row_mean_matches_bias_mean() {
        let mut rng = SeedStream::new(3);
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::randn(&[4, 6], 2.0, &mut rng));
        let g = tape.constant(&Tensor::full(&[6], 1.0));
        let bias = Tensor::randn(&[6], 1.0, &mut rng);
        let bmean = bias.data().iter().sum::<f64>() / 6.0;
        let b = tape.constant(&bias);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for row in tape.value(y).chunks(6) {
            assert!((row.iter().sum::<f64>() / 6.0 - bmean).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_and_quadratic_gradients() {
        let mut rng = SeedStream::new(4);
        let w0 = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let w = tape.param(&w0);
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0; 6]);

        let mut tape = Tape::new();
        let w = tape.param(&w0);
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let l = tape.scale(s, 0.5).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), w0.data());
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        let d = tape.constant(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(TensorError::Contract(_))));
        let y = tape.mul(w, d).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(d).is_none());
        assert!(matches!(tape.backward(l), Err(TensorError::Contract(_))));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn tapes_are_isolated() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.param(&Tensor::scalar(1.0));
        let _ = b.param(&Tensor::scalar(2.0));
        assert!(b.sigmoid(x).is_err());
        assert!(b.grad(x).is_none());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = SeedStream::new(5);
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::randn(&[2 * 5, 8], 1.0, &mut rng));
        let k = tape.constant(&Tensor::randn(&[2 * 5, 8], 1.0, &mut rng));
        let v = tape.constant(&Tensor::randn(&[2 * 5, 8], 1.0, &mut rng));
        for causal in [false, true] {
            let layout = AttnLayout {
                seqs: 2,
                len: 5,
                heads: 2,
                causal,
            };
            let y = tape.attention(q, k, v, layout).unwrap();
            let p = tape.attention_probs(y).unwrap();
            for (r, row) in p.chunks(5).enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                if causal {
                    let i = r % 5;
                    assert!(row[i + 1..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn raw_bytes_round_trip() {
        let mut rng = SeedStream::new(6);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let y = Tensor::from_le_bytes(vec![3, 4], &x.to_le_bytes()).unwrap();
        assert_eq!(x, y);
        assert!(Tensor::from_le_bytes(vec![3, 4], &[0u8; 7]).is_err());
    }
}
