//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape: every operation records its inputs and
//! enough context to replay a vector-Jacobian product, so topological order is
//! the append order and the graph is acyclic by construction. All arithmetic
//! is f64. Tensors recorded on the tape are never mutated in place.
//!
//! [`grad_check`] is the central-finite-difference oracle used throughout the
//! test suite to validate every backward rule.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// One node of the tape: value, shape, and (after backward) its gradient.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub id: TensorId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnKind {
    Exp,
    Log,
    Neg,
    Sqrt,
    Softplus,
    Sigmoid,
    Gelu,
    Sin,
    Cos,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Bin { kind: BinKind, lhs: TensorId, rhs: TensorId },
    Un { kind: UnKind, input: TensorId },
    MaxScalar { input: TensorId, bound: f64 },
    MulScalar { input: TensorId, factor: f64 },
    AddScalar { input: TensorId },
    MatMul { lhs: TensorId, rhs: TensorId, m: usize, k: usize, n: usize },
    Transpose { input: TensorId },
    Reshape { input: TensorId },
    SliceCols { input: TensorId, start: usize, len: usize },
    ConcatCols { inputs: Vec<TensorId> },
    Sum { input: TensorId, axis: Option<usize> },
    Mean { input: TensorId, axis: Option<usize> },
    Softmax { input: TensorId, axis: usize, temp: f64 },
    LogSoftmax { input: TensorId, axis: usize, temp: f64 },
    L2Normalize { input: TensorId, axis: usize, eps: f64 },
    PosInterp { input: TensorId, from_grid: usize, to_grid: usize },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Bin { kind, .. } => match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
            BinKind::Pow => "pow",
        },
        Op::Un { kind, .. } => match kind {
            UnKind::Exp => "exp",
            UnKind::Log => "log",
            UnKind::Neg => "neg",
            UnKind::Sqrt => "sqrt",
            UnKind::Softplus => "softplus",
            UnKind::Sigmoid => "sigmoid",
            UnKind::Gelu => "gelu",
            UnKind::Sin => "sin",
            UnKind::Cos => "cos",
        },
        Op::MaxScalar { .. } => "max_scalar",
        Op::MulScalar { .. } => "mul_scalar",
        Op::AddScalar { .. } => "add_scalar",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Reshape { .. } => "reshape",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols { .. } => "concat_cols",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::PosInterp { .. } => "pos_interp",
    }
}

// ---------------------------------------------------------------------------
// shape helpers (trailing-dimension broadcasting)
// ---------------------------------------------------------------------------

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Broadcast shape of two operands under trailing-dimension rules.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Row-major strides with 0 on broadcast (size-1) axes, left-padded to `rank`.
fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

/// Materialize `data` (of `shape`) tiled out to `out_shape`.
pub fn expand_to(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    let rank = out_shape.len();
    let strides = broadcast_strides(shape, rank);
    let total = numel(out_shape);
    let mut out = vec![0.0; total];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src -= coords[d] * strides[d];
            coords[d] = 0;
        }
    }
    out
}

/// Sum `grad` (of `from_shape`) down to `to_shape` along broadcast axes.
fn reduce_to_shape(grad: &[f64], from_shape: &[usize], to_shape: &[usize]) -> Vec<f64> {
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let target: usize = numel(to_shape);
    if target == 1 {
        return vec![grad.iter().sum()];
    }
    // suffix tile: target shape equals the trailing dims of the source
    let stripped: Vec<usize> = to_shape.iter().copied().skip_while(|&d| d == 1).collect();
    let tlen = numel(&stripped);
    if tlen == target
        && stripped.len() <= from_shape.len()
        && from_shape[from_shape.len() - stripped.len()..] == stripped[..]
    {
        let mut out = vec![0.0; target];
        for chunk in grad.chunks_exact(target) {
            for (o, g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
        return out;
    }
    let rank = from_shape.len();
    let strides = broadcast_strides(to_shape, rank);
    let mut out = vec![0.0; target];
    let mut coords = vec![0usize; rank];
    let mut dst = 0usize;
    for g in grad {
        out[dst] += g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            dst += strides[d];
            if coords[d] < from_shape[d] {
                break;
            }
            dst -= coords[d] * strides[d];
            coords[d] = 0;
        }
    }
    out
}

/// Does `b` act as a repeated suffix tile of shape `a`? (e.g. [T,E] op [E])
fn is_suffix_tile(a: &[usize], b: &[usize]) -> bool {
    let stripped: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
    stripped.len() <= a.len() && a[a.len() - stripped.len()..] == stripped[..] && !stripped.is_empty()
}

fn axis_spans(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

// ---------------------------------------------------------------------------
// raw matmul kernels
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] · B[k,n]
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *cv = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C[m,n] = A[k,m]ᵀ · B[k,n]
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

// ---------------------------------------------------------------------------
// scalar math helpers
// ---------------------------------------------------------------------------

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

/// Per-cell bilinear weights for resampling a square grid (align-corners=false).
fn grid_interp_weights(from: usize, to: usize) -> Vec<[(usize, f64); 4]> {
    let mut rows = Vec::with_capacity(to * to);
    let scale = from as f64 / to as f64;
    for oy in 0..to {
        let sy = ((oy as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(from - 1);
        let fy = sy - y0 as f64;
        for ox in 0..to {
            let sx = ((ox as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(from - 1);
            let fx = sx - x0 as f64;
            rows.push([
                (y0 * from + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * from + x1, (1.0 - fy) * fx),
                (y1 * from + x0, fy * (1.0 - fx)),
                (y1 * from + x1, fy * fx),
            ]);
        }
    }
    rows
}

// ---------------------------------------------------------------------------
// the tape
// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), ops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node; grads are gone with them.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.ops.clear();
    }

    /// Reset all grads to absent without touching values.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![1], Op::Leaf)
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor { shape, data, grad: None, id });
        self.ops.push(op);
        id
    }

    /// First tape entry holding a NaN or infinity, with its operation name.
    pub fn first_non_finite(&self) -> Option<(usize, String)> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.data.iter().any(|v| !v.is_finite()) {
                return Some((i, format!("{} (node {i}, shape {:?})", op_name(&self.ops[i]), node.shape)));
            }
        }
        None
    }

    // -- elementwise binaries ------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Div, a, b)
    }

    /// Elementwise a^b; the base must be strictly positive so the exponent
    /// gradient (which involves ln a) is defined.
    pub fn pow(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Pow, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
            BinKind::Pow => "pow",
        };
        let (a_shape, b_shape) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        let out_shape = broadcast_shape(name, &a_shape, &b_shape)?;
        match kind {
            BinKind::Div => {
                if self.nodes[b.0].data.iter().any(|&v| v == 0.0) {
                    return Err(Error::Domain { op: "div", detail: "division by zero".into() });
                }
            }
            BinKind::Pow => {
                if self.nodes[a.0].data.iter().any(|&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "pow",
                        detail: "base must be strictly positive".into(),
                    });
                }
            }
            _ => {}
        }
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
            BinKind::Pow => x.powf(y),
        };
        let adata = &self.nodes[a.0].data;
        let bdata = &self.nodes[b.0].data;
        let out = if a_shape == b_shape {
            adata.iter().zip(bdata).map(|(&x, &y)| f(x, y)).collect()
        } else if bdata.len() == 1 {
            let y = bdata[0];
            adata.iter().map(|&x| f(x, y)).collect()
        } else if adata.len() == 1 {
            let x = adata[0];
            bdata.iter().map(|&y| f(x, y)).collect()
        } else if out_shape == a_shape && is_suffix_tile(&a_shape, &b_shape) {
            let mut out = Vec::with_capacity(adata.len());
            for chunk in adata.chunks_exact(bdata.len()) {
                out.extend(chunk.iter().zip(bdata).map(|(&x, &y)| f(x, y)));
            }
            out
        } else {
            let ax = expand_to(adata, &a_shape, &out_shape);
            let bx = expand_to(bdata, &b_shape, &out_shape);
            ax.iter().zip(&bx).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok(self.push(out, out_shape, Op::Bin { kind, lhs: a, rhs: b }))
    }

    // -- elementwise unaries -------------------------------------------------

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnKind::Exp, a)
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].data.iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain { op: "log", detail: "argument must be positive".into() });
        }
        self.unary(UnKind::Log, a)
    }

    pub fn neg(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnKind::Neg, a)
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].data.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain { op: "sqrt", detail: "argument must be non-negative".into() });
        }
        self.unary(UnKind::Sqrt, a)
    }

    pub fn softplus(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnKind::Softplus, a)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnKind::Sigmoid, a)
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnKind::Gelu, a)
    }

    pub fn sin(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnKind::Sin, a)
    }

    pub fn cos(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnKind::Cos, a)
    }

    fn unary(&mut self, kind: UnKind, a: TensorId) -> Result<TensorId> {
        let f = |x: f64| match kind {
            UnKind::Exp => x.exp(),
            UnKind::Log => x.ln(),
            UnKind::Neg => -x,
            UnKind::Sqrt => x.sqrt(),
            UnKind::Softplus => softplus_scalar(x),
            UnKind::Sigmoid => sigmoid_scalar(x),
            UnKind::Gelu => gelu_scalar(x),
            UnKind::Sin => x.sin(),
            UnKind::Cos => x.cos(),
        };
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, Op::Un { kind, input: a }))
    }

    /// Elementwise max(x, bound).
    pub fn max_scalar(&mut self, a: TensorId, bound: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.max(bound)).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, Op::MaxScalar { input: a, bound }))
    }

    pub fn mul_scalar(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * factor).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, Op::MulScalar { input: a, factor }))
    }

    pub fn add_scalar(&mut self, a: TensorId, offset: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x + offset).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, Op::AddScalar { input: a }))
    }

    // -- linear algebra / shape ----------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let a_shape = self.nodes[a.0].shape.clone();
        let b_shape = self.nodes[b.0].shape.clone();
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: a_shape, rhs: b_shape });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let data = mm_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        Ok(self.push(data, vec![m, n], Op::MatMul { lhs: a, rhs: b, m, k, n }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch { op: "transpose", lhs: shape, rhs: vec![] });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        Ok(self.push(data, vec![cols, rows], Op::Transpose { input: a }))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[a.0].data.clone();
        Ok(self.push(data, shape.to_vec(), Op::Reshape { input: a }))
    }

    /// Columns [start, start+len) of a 2-D tensor.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 || start + len > shape[1] {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(data, vec![rows, len], Op::SliceCols { input: a, start, len }))
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Validation("concat_cols: empty input list".into()));
        }
        let rows = self.nodes[parts[0].0].shape[0];
        let mut total_cols = 0usize;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: s.clone(),
                });
            }
            total_cols += s[1];
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                let cols = self.nodes[p.0].shape[1];
                let src = &self.nodes[p.0].data;
                data.extend_from_slice(&src[r * cols..(r + 1) * cols]);
            }
        }
        Ok(self.push(data, vec![rows, total_cols], Op::ConcatCols { inputs: parts.to_vec() }))
    }

    // -- reductions and normalizers -------------------------------------------

    pub fn sum(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId> {
        self.reduce(a, axis, true)
    }

    fn reduce(&mut self, a: TensorId, axis: Option<usize>, averaged: bool) -> Result<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        let src = &self.nodes[a.0].data;
        let op = if averaged {
            Op::Mean { input: a, axis }
        } else {
            Op::Sum { input: a, axis }
        };
        match axis {
            None => {
                let mut s: f64 = src.iter().sum();
                if averaged {
                    s /= src.len() as f64;
                }
                Ok(self.push(vec![s], vec![1], op))
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::ShapeMismatch { op: "reduce", lhs: shape, rhs: vec![ax] });
                }
                let (outer, len, inner) = axis_spans(&shape, ax);
                let mut out_shape: Vec<usize> = shape.clone();
                out_shape.remove(ax);
                if out_shape.is_empty() {
                    out_shape.push(1);
                }
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(&src[base..base + inner]) {
                            *d += v;
                        }
                    }
                }
                if averaged {
                    let inv = 1.0 / len as f64;
                    for v in &mut out {
                        *v *= inv;
                    }
                }
                Ok(self.push(out, out_shape, op))
            }
        }
    }

    /// Temperature softmax along `axis`: softmax(x / temp), max-subtracted.
    pub fn softmax(&mut self, a: TensorId, axis: usize, temp: f64) -> Result<TensorId> {
        if temp <= 0.0 {
            return Err(Error::Domain { op: "softmax", detail: format!("temperature {temp} <= 0") });
        }
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch { op: "softmax", lhs: shape, rhs: vec![axis] });
        }
        let data = self.softmax_values(a, axis, temp, false);
        Ok(self.push(data, shape, Op::Softmax { input: a, axis, temp }))
    }

    pub fn log_softmax(&mut self, a: TensorId, axis: usize, temp: f64) -> Result<TensorId> {
        if temp <= 0.0 {
            return Err(Error::Domain {
                op: "log_softmax",
                detail: format!("temperature {temp} <= 0"),
            });
        }
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch { op: "log_softmax", lhs: shape, rhs: vec![axis] });
        }
        let data = self.softmax_values(a, axis, temp, true);
        Ok(self.push(data, shape, Op::LogSoftmax { input: a, axis, temp }))
    }

    fn softmax_values(&self, a: TensorId, axis: usize, temp: f64, log: bool) -> Vec<f64> {
        let shape = &self.nodes[a.0].shape;
        let src = &self.nodes[a.0].data;
        let (outer, len, inner) = axis_spans(shape, axis);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut max_z = f64::NEG_INFINITY;
                for l in 0..len {
                    max_z = max_z.max(src[at(l)] / temp);
                }
                let mut denom = 0.0;
                for l in 0..len {
                    denom += (src[at(l)] / temp - max_z).exp();
                }
                if log {
                    let lse = max_z + denom.ln();
                    for l in 0..len {
                        out[at(l)] = src[at(l)] / temp - lse;
                    }
                } else {
                    for l in 0..len {
                        out[at(l)] = (src[at(l)] / temp - max_z).exp() / denom;
                    }
                }
            }
        }
        out
    }

    /// L2 normalization along `axis`. Slices with norm below `eps` map to the
    /// zero vector (and receive zero gradient).
    pub fn l2_normalize(&mut self, a: TensorId, axis: usize, eps: f64) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::Domain { op: "l2_normalize", detail: format!("epsilon {eps} <= 0") });
        }
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch { op: "l2_normalize", lhs: shape, rhs: vec![axis] });
        }
        let src = &self.nodes[a.0].data;
        let (outer, len, inner) = axis_spans(&shape, axis);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let norm: f64 = (0..len).map(|l| src[at(l)] * src[at(l)]).sum::<f64>().sqrt();
                if norm >= eps {
                    for l in 0..len {
                        out[at(l)] = src[at(l)] / norm;
                    }
                }
            }
        }
        Ok(self.push(out, shape, Op::L2Normalize { input: a, axis, eps }))
    }

    /// Bilinear resampling of a positional table [from², E] to [to², E].
    pub fn pos_interp(&mut self, table: TensorId, from_grid: usize, to_grid: usize) -> Result<TensorId> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 || shape[0] != from_grid * from_grid {
            return Err(Error::ShapeMismatch {
                op: "pos_interp",
                lhs: shape,
                rhs: vec![from_grid * from_grid],
            });
        }
        let e = shape[1];
        let src = &self.nodes[table.0].data;
        let weights = grid_interp_weights(from_grid, to_grid);
        let mut data = vec![0.0; to_grid * to_grid * e];
        for (cell, wts) in weights.iter().enumerate() {
            let dst = &mut data[cell * e..(cell + 1) * e];
            for &(src_cell, w) in wts {
                if w == 0.0 {
                    continue;
                }
                let row = &src[src_cell * e..(src_cell + 1) * e];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += w * v;
                }
            }
        }
        Ok(self.push(data, vec![to_grid * to_grid, e], Op::PosInterp { input: table, from_grid, to_grid }))
    }

    // -- backward --------------------------------------------------------------

    /// Reverse pass from a scalar loss. Each call adds one full gradient into
    /// every reachable tensor's `grad`, so repeated calls without
    /// `reset_grads` accumulate; the trainer always builds a fresh graph per
    /// step.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Validation("backward on empty graph".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Domain {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            });
        }
        // per-pass scratch so a second backward adds exactly one more gradient
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            let op = self.ops[i].clone();
            self.backprop_node(&mut scratch, i, &g, &op);
            scratch[i] = Some(g);
        }
        for (node, pass_grad) in self.nodes.iter_mut().zip(scratch) {
            if let Some(pg) = pass_grad {
                match &mut node.grad {
                    Some(g) => {
                        for (slot, c) in g.iter_mut().zip(&pg) {
                            *slot += c;
                        }
                    }
                    None => node.grad = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn accumulate(scratch: &mut [Option<Vec<f64>>], id: TensorId, contrib: &[f64]) {
        match &mut scratch[id.0] {
            Some(g) => {
                for (slot, c) in g.iter_mut().zip(contrib) {
                    *slot += c;
                }
            }
            None => scratch[id.0] = Some(contrib.to_vec()),
        }
    }

    fn backprop_node(&self, scratch: &mut [Option<Vec<f64>>], i: usize, g: &[f64], op: &Op) {
        match op {
            Op::Leaf => {}
            Op::Bin { kind, lhs, rhs } => self.backprop_binary(scratch, i, g, *kind, *lhs, *rhs),
            Op::Un { kind, input } => {
                let x = &self.nodes[input.0].data;
                let y = &self.nodes[i].data;
                let contrib: Vec<f64> = match kind {
                    UnKind::Exp => g.iter().zip(y).map(|(gv, &yv)| gv * yv).collect(),
                    UnKind::Log => g.iter().zip(x).map(|(gv, &xv)| gv / xv).collect(),
                    UnKind::Neg => g.iter().map(|gv| -gv).collect(),
                    UnKind::Sqrt => g.iter().zip(y).map(|(gv, &yv)| gv / (2.0 * yv)).collect(),
                    UnKind::Softplus => {
                        g.iter().zip(x).map(|(gv, &xv)| gv * sigmoid_scalar(xv)).collect()
                    }
                    UnKind::Sigmoid => {
                        g.iter().zip(y).map(|(gv, &yv)| gv * yv * (1.0 - yv)).collect()
                    }
                    UnKind::Gelu => g.iter().zip(x).map(|(gv, &xv)| gv * gelu_deriv(xv)).collect(),
                    UnKind::Sin => g.iter().zip(x).map(|(gv, &xv)| gv * xv.cos()).collect(),
                    UnKind::Cos => g.iter().zip(x).map(|(gv, &xv)| -gv * xv.sin()).collect(),
                };
                Self::accumulate(scratch, *input, &contrib);
            }
            Op::MaxScalar { input, bound } => {
                let x = &self.nodes[input.0].data;
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > *bound { *gv } else { 0.0 })
                    .collect();
                Self::accumulate(scratch, *input, &contrib);
            }
            Op::MulScalar { input, factor } => {
                let contrib: Vec<f64> = g.iter().map(|gv| gv * factor).collect();
                Self::accumulate(scratch, *input, &contrib);
            }
            Op::AddScalar { input } => {
                Self::accumulate(scratch, *input, g);
            }
            Op::MatMul { lhs, rhs, m, k, n } => {
                let da = mm_nt(g, &self.nodes[rhs.0].data, *m, *n, *k);
                let db = mm_tn(&self.nodes[lhs.0].data, g, *m, *k, *n);
                Self::accumulate(scratch, *lhs, &da);
                Self::accumulate(scratch, *rhs, &db);
            }
            Op::Transpose { input } => {
                let out_shape = self.nodes[i].shape.clone();
                let (rows, cols) = (out_shape[0], out_shape[1]);
                let mut contrib = vec![0.0; g.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        contrib[c * rows + r] = g[r * cols + c];
                    }
                }
                Self::accumulate(scratch, *input, &contrib);
            }
            Op::Reshape { input } => {
                Self::accumulate(scratch, *input, g);
            }
            Op::SliceCols { input, start, len } => {
                let in_shape = self.nodes[input.0].shape.clone();
                let (rows, cols) = (in_shape[0], in_shape[1]);
                let mut contrib = vec![0.0; rows * cols];
                for r in 0..rows {
                    contrib[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                Self::accumulate(scratch, *input, &contrib);
            }
            Op::ConcatCols { inputs } => {
                let rows = self.nodes[i].shape[0];
                let total_cols = self.nodes[i].shape[1];
                let mut offset = 0usize;
                for &p in inputs {
                    let cols = self.nodes[p.0].shape[1];
                    let mut contrib = vec![0.0; rows * cols];
                    for r in 0..rows {
                        contrib[r * cols..(r + 1) * cols]
                            .copy_from_slice(&g[r * total_cols + offset..r * total_cols + offset + cols]);
                    }
                    Self::accumulate(scratch, p, &contrib);
                    offset += cols;
                }
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let averaged = matches!(op, Op::Mean { .. });
                let in_shape = self.nodes[input.0].shape.clone();
                let total = numel(&in_shape);
                match axis {
                    None => {
                        let scale = if averaged { 1.0 / total as f64 } else { 1.0 };
                        let contrib = vec![g[0] * scale; total];
                        Self::accumulate(scratch, *input, &contrib);
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_spans(&in_shape, *ax);
                        let scale = if averaged { 1.0 / len as f64 } else { 1.0 };
                        let mut contrib = vec![0.0; total];
                        for o in 0..outer {
                            let grow = &g[o * inner..(o + 1) * inner];
                            for l in 0..len {
                                let base = (o * len + l) * inner;
                                for (slot, gv) in contrib[base..base + inner].iter_mut().zip(grow) {
                                    *slot = gv * scale;
                                }
                            }
                        }
                        Self::accumulate(scratch, *input, &contrib);
                    }
                }
            }
            Op::Softmax { input, axis, temp } => {
                let shape = self.nodes[i].shape.clone();
                let y = self.nodes[i].data.clone();
                let (outer, len, inner) = axis_spans(&shape, *axis);
                let mut contrib = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + ii;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            contrib[at(l)] = y[at(l)] * (g[at(l)] - dot) / temp;
                        }
                    }
                }
                Self::accumulate(scratch, *input, &contrib);
            }
            Op::LogSoftmax { input, axis, temp } => {
                let shape = self.nodes[i].shape.clone();
                let y = self.nodes[i].data.clone();
                let (outer, len, inner) = axis_spans(&shape, *axis);
                let mut contrib = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + ii;
                        let gsum: f64 = (0..len).map(|l| g[at(l)]).sum();
                        for l in 0..len {
                            contrib[at(l)] = (g[at(l)] - y[at(l)].exp() * gsum) / temp;
                        }
                    }
                }
                Self::accumulate(scratch, *input, &contrib);
            }
            Op::L2Normalize { input, axis, eps } => {
                let shape = self.nodes[i].shape.clone();
                let x = self.nodes[input.0].data.clone();
                let y = &self.nodes[i].data;
                let (outer, len, inner) = axis_spans(&shape, *axis);
                let mut contrib = vec![0.0; x.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + ii;
                        let norm: f64 = (0..len).map(|l| x[at(l)] * x[at(l)]).sum::<f64>().sqrt();
                        if norm < *eps {
                            continue;
                        }
                        let ydotg: f64 = (0..len).map(|l| y[at(l)] * g[at(l)]).sum();
                        for l in 0..len {
                            contrib[at(l)] = (g[at(l)] - y[at(l)] * ydotg) / norm;
                        }
                    }
                }
                Self::accumulate(scratch, *input, &contrib);
            }
            Op::PosInterp { input, from_grid, to_grid } => {
                let e = self.nodes[input.0].shape[1];
                let weights = grid_interp_weights(*from_grid, *to_grid);
                let mut contrib = vec![0.0; self.nodes[input.0].data.len()];
                for (cell, wts) in weights.iter().enumerate() {
                    let grow = &g[cell * e..(cell + 1) * e];
                    for &(src_cell, w) in wts {
                        if w == 0.0 {
                            continue;
                        }
                        let dst = &mut contrib[src_cell * e..(src_cell + 1) * e];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d += w * gv;
                        }
                    }
                }
                Self::accumulate(scratch, *input, &contrib);
            }
        }
    }

    fn backprop_binary(&self, scratch: &mut [Option<Vec<f64>>], i: usize, g: &[f64], kind: BinKind, lhs: TensorId, rhs: TensorId) {
        let out_shape = self.nodes[i].shape.clone();
        let a_shape = self.nodes[lhs.0].shape.clone();
        let b_shape = self.nodes[rhs.0].shape.clone();
        let (da_full, db_full): (Vec<f64>, Vec<f64>) = match kind {
            BinKind::Add => (g.to_vec(), g.to_vec()),
            BinKind::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
            BinKind::Mul | BinKind::Div | BinKind::Pow => {
                let ax = expand_to(&self.nodes[lhs.0].data, &a_shape, &out_shape);
                let bx = expand_to(&self.nodes[rhs.0].data, &b_shape, &out_shape);
                match kind {
                    BinKind::Mul => (
                        g.iter().zip(&bx).map(|(gv, &b)| gv * b).collect(),
                        g.iter().zip(&ax).map(|(gv, &a)| gv * a).collect(),
                    ),
                    BinKind::Div => (
                        g.iter().zip(&bx).map(|(gv, &b)| gv / b).collect(),
                        g.iter()
                            .zip(ax.iter().zip(&bx))
                            .map(|(gv, (&a, &b))| -gv * a / (b * b))
                            .collect(),
                    ),
                    BinKind::Pow => {
                        let y = &self.nodes[i].data;
                        (
                            g.iter()
                                .zip(y.iter().zip(ax.iter().zip(&bx)))
                                .map(|(gv, (&yv, (&a, &b)))| gv * b * yv / a)
                                .collect(),
                            g.iter()
                                .zip(y.iter().zip(&ax))
                                .map(|(gv, (&yv, &a))| gv * yv * a.ln())
                                .collect(),
                        )
                    }
                    _ => unreachable!(),
                }
            }
        };
        let da = reduce_to_shape(&da_full, &out_shape, &a_shape);
        let db = reduce_to_shape(&db_full, &out_shape, &b_shape);
        Self::accumulate(scratch, lhs, &da);
        Self::accumulate(scratch, rhs, &db);
    }
}

// ---------------------------------------------------------------------------
// finite-difference gradient oracle
// ---------------------------------------------------------------------------

/// A differentiable scalar function of several leaf tensors.
pub type GraphFn<'a> = dyn Fn(&mut Graph, &[TensorId]) -> Result<TensorId> + 'a;

/// Max relative error between analytic gradients and central finite
/// differences, `|analytic - numeric| / max(1, |numeric|)`, over every
/// coordinate of every leaf. `h` must lie in (0, 1e-3].
pub fn grad_check(f: &GraphFn, leaves: &[(&[f64], &[usize])], h: f64) -> Result<f64> {
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::Domain { op: "grad_check", detail: format!("h {h} outside (0, 1e-3]") });
    }
    let eval = |data: &[Vec<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let mut ids = Vec::with_capacity(data.len());
        for (values, (_, shape)) in data.iter().zip(leaves) {
            ids.push(g.leaf(values.clone(), shape)?);
        }
        let out = f(&mut g, &ids)?;
        if g.data(out).len() != 1 {
            return Err(Error::Domain {
                op: "grad_check",
                detail: format!("function output must be scalar, got shape {:?}", g.shape(out)),
            });
        }
        Ok(g.value(out))
    };

    // analytic pass
    let mut g = Graph::new();
    let mut ids = Vec::with_capacity(leaves.len());
    for (values, shape) in leaves {
        ids.push(g.leaf(values.to_vec(), shape)?);
    }
    let out = f(&mut g, &ids)?;
    if g.data(out).len() != 1 {
        return Err(Error::Domain {
            op: "grad_check",
            detail: format!("function output must be scalar, got shape {:?}", g.shape(out)),
        });
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(leaves)
        .map(|(id, (values, _))| g.grad(*id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; values.len()]))
        .collect();

    let base: Vec<Vec<f64>> = leaves.iter().map(|(v, _)| v.to_vec()).collect();
    let mut max_err: f64 = 0.0;
    for (li, values) in base.iter().enumerate() {
        for ci in 0..values.len() {
            let mut plus = base.clone();
            plus[li][ci] += h;
            let mut minus = base.clone();
            minus[li][ci] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let err = (analytic[li][ci] - numeric).abs() / numeric.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
