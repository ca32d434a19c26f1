//! Reverse-mode automatic differentiation over dense tensors of rank ≤ 3.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and the
//! parent links needed for the backward pass, so node order is already a
//! topological order.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use thiserror::Error;

pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + 'static {
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Added to attention scores above the diagonal.
pub const MASK_VALUE: f64 = -1e4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: id {id} out of range for {rows} rows")]
    IdOutOfRange { op: &'static str, id: usize, rows: usize },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("no gradient available: run backward first")]
    NoGradient,
}

type Result<T> = std::result::Result<T, AutodiffError>;

fn shape_err(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape { op, detail: detail.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.len() > 3 {
            return Err(shape_err("tensor", format!("rank {} > 3", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("tensor", format!("{shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, batched: bool },
    Transpose(Var),
    Reshape(Var),
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Relu(Var),
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Dropout { a: Var, mask: Vec<T> },
    CausalMask(Var),
    SplitHeads { a: Var, heads: usize },
    MergeHeads { a: Var, heads: usize },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    training: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph::new(false)
    }
}

// Row-major kernels. Every sum runs in a fixed order.

/// c (m×n) += a (m×k) · b (k×n)
fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// c (m×n) += a (m×k) · bᵀ where b is (n×k)
fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = c[i * n + j] + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c (m×n) += aᵀ · b where a is (r×m) and b is (r×n)
fn gemm_tn<T: Scalar>(r: usize, m: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for row in 0..r {
        let brow = &b[row * n..(row + 1) * n];
        for i in 0..m {
            let av = a[row * m + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let k = T::c(0.044715);
    let half = T::c(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::c(3.0) * k * x * x);
    (y, dy)
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
    max + sum.ln()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Graph<T> {
    /// `training` switches dropout on.
    pub fn new(training: bool) -> Self {
        Graph { nodes: Vec::new(), training }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad: true, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Result<&[T]> {
        self.nodes[v.0].grad.as_deref().ok_or(AutodiffError::NoGradient)
    }

    /// `a (.., k) · b (k, n)`, or a batched product when both have rank 3.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let detail = || format!("{sa:?} x {sb:?}");
        if sa.is_empty() || sb.len() < 2 {
            return Err(shape_err("matmul", detail()));
        }
        let (value, batched) = if sb.len() == 3 {
            if sa.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(shape_err("matmul", detail()));
            }
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = vec![T::zero(); bs * m * n];
            let (av, bv) = (&self.value(a).data, &self.value(b).data);
            for i in 0..bs {
                gemm_nn(m, k, n, &av[i * m * k..], &bv[i * k * n..], &mut out[i * m * n..(i + 1) * m * n]);
            }
            (Tensor { shape: vec![bs, m, n], data: out }, true)
        } else {
            let k = *sa.last().unwrap_or(&0);
            if sb[0] != k {
                return Err(shape_err("matmul", detail()));
            }
            let n = sb[1];
            let rows = self.value(a).len() / k.max(1);
            let mut out = vec![T::zero(); rows * n];
            gemm_nn(rows, k, n, &self.value(a).data, &self.value(b).data, &mut out);
            let mut shape = sa.clone();
            if let Some(last) = shape.last_mut() {
                *last = n;
            }
            (Tensor { shape, data: out }, false)
        };
        self.push(value, Op::MatMul { a, b, batched }, &[a, b], "matmul")
    }

    /// Swaps the last two extents.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose", format!("rank {}", s.len())));
        }
        let r = s.len();
        let (m, n) = (s[r - 2], s[r - 1]);
        let batches = self.value(a).len() / (m * n).max(1);
        let src = &self.value(a).data;
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batches {
            for i in 0..m {
                for j in 0..n {
                    out[b * m * n + j * m + i] = src[b * m * n + i * n + j];
                }
            }
        }
        let mut shape = s;
        shape.swap(r - 2, r - 1);
        self.push(Tensor { shape, data: out }, Op::Transpose(a), &[a], "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.len() > 3 {
            return Err(shape_err("reshape", format!("{:?} to {shape:?}", self.shape(a))));
        }
        let data = self.value(a).data.clone();
        self.push(Tensor { shape: shape.to_vec(), data }, Op::Reshape(a), &[a], "reshape")
    }

    /// Elementwise sum; `b` may match only the trailing extents of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", format!("{sa:?} + {sb:?}")));
        }
        let bv = &self.value(b).data;
        let mut out = self.value(a).data.clone();
        for chunk in out.chunks_mut(bv.len().max(1)) {
            add_into(chunk, bv);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data: out }, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Mul { a, b }, &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let data = self.value(a).data.iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Scale { a, s }, &[a], "scale")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).last_dim().max(1);
        let src = &self.value(a).data;
        let mut out = vec![T::zero(); src.len()];
        for (row, o) in src.chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(row, o);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data: out }, Op::Softmax(a), &[a], "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).last_dim().max(1);
        let src = &self.value(a).data;
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&x| x - lse));
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data: out }, Op::LogSoftmax(a), &[a], "log_softmax")
    }

    /// Normalizes over the last extent, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("input {:?}, gain {:?}, bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        let eps = T::c(LAYER_NORM_EPS);
        let n = T::c(d as f64);
        let src = &self.value(x).data;
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(src.len() / d.max(1));
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor { shape, data: out },
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data.iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Relu(a), &[a], "relu")
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data.iter().map(|&x| gelu_parts(x).0).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Gelu(a), &[a], "gelu")
    }

    /// Rows of `table` (rows × d) selected by `ids`; the result has shape
    /// `id_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || id_shape.iter().product::<usize>() != ids.len() || id_shape.len() > 2 {
            return Err(shape_err("embedding", format!("table {ts:?}, ids {id_shape:?}")));
        }
        let (rows, d) = (ts[0], ts[1]);
        let src = &self.value(table).data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(AutodiffError::IdOutOfRange { op: "embedding", id, rows });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        self.push(Tensor { shape, data: out }, Op::Embedding { table, ids: ids.to_vec() }, &[table], "embedding")
    }

    /// Mean negative log-likelihood over rows whose target is not `None`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let v = self.value(logits).last_dim();
        let rows = self.value(logits).len() / v.max(1);
        if rows != targets.len() {
            return Err(shape_err("cross_entropy", format!("{rows} rows, {} targets", targets.len())));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(shape_err("cross_entropy", "every target is ignored"));
        }
        let src = &self.value(logits).data;
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= v {
                return Err(AutodiffError::IdOutOfRange { op: "cross_entropy", id: t, rows: v });
            }
            let row = &src[r * v..(r + 1) * v];
            softmax_row(row, &mut probs[r * v..(r + 1) * v]);
            total = total + (log_sum_exp(row) - row[t]);
        }
        let loss = total / T::c(count as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            &[logits],
            "cross_entropy",
        )
    }

    /// Inverted dropout with drop probability `p`; identity outside training.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(a);
        }
        let keep = T::c(1.0 / (1.0 - p));
        let mask: Vec<T> =
            (0..self.value(a).len()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        self.dropout_with_mask(a, mask)
    }

    /// Multiplies by a fixed, already scaled mask.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(shape_err("dropout", format!("mask {} for {:?}", mask.len(), self.shape(a))));
        }
        let data = self.value(a).data.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Dropout { a, mask }, &[a], "dropout")
    }

    /// Adds [`MASK_VALUE`] above the diagonal of each trailing square block.
    pub fn causal_mask_add(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let r = s.len();
        if r < 2 || s[r - 1] != s[r - 2] {
            return Err(shape_err("causal_mask_add", format!("{s:?} is not square in its last two extents")));
        }
        let l = s[r - 1];
        let mask = T::c(MASK_VALUE);
        let mut out = self.value(a).data.clone();
        for block in out.chunks_mut((l * l).max(1)) {
            for i in 0..l {
                for j in i + 1..l {
                    block[i * l + j] = block[i * l + j] + mask;
                }
            }
        }
        self.push(Tensor { shape: s, data: out }, Op::CausalMask(a), &[a], "causal_mask_add")
    }

    /// (B, L, H·d) → (B·H, L, d)
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(shape_err("split_heads", format!("{s:?} into {heads} heads")));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let src = &self.value(a).data;
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for t in 0..l {
                for h in 0..heads {
                    let from = (bi * l + t) * d + h * dh;
                    let to = ((bi * heads + h) * l + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        self.push(Tensor { shape: vec![b * heads, l, dh], data: out }, Op::SplitHeads { a, heads }, &[a], "split_heads")
    }

    /// (B·H, L, d) → (B, L, H·d)
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(shape_err("merge_heads", format!("{s:?} from {heads} heads")));
        }
        let (bh, l, dh) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = dh * heads;
        let src = &self.value(a).data;
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for t in 0..l {
                for h in 0..heads {
                    let to = (bi * l + t) * d + h * dh;
                    let from = ((bi * heads + h) * l + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        self.push(Tensor { shape: vec![b, l, d], data: out }, Op::MergeHeads { a, heads }, &[a], "merge_heads")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data.iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(total), Op::Sum(a), &[a], "sum")
    }

    /// Accumulates d(output)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(AutodiffError::NotScalar(self.shape(output).to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[output.0].grad = Some(vec![T::one()]);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[idx].grad.take() else { continue };
            self.backward_node(idx, &gy);
            self.nodes[idx].grad = Some(gy);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: impl FnOnce(&Self) -> Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let d = delta(self);
        match &mut self.nodes[v.0].grad {
            Some(g) => add_into(g, &d),
            slot @ None => *slot = Some(d),
        }
    }

    fn zeros_like(&self, v: Var) -> Vec<T> {
        vec![T::zero(); self.value(v).len()]
    }

    fn backward_node(&mut self, idx: usize, gy: &[T]) {
        // Ops keep their caches in the node; take it out so `self` stays borrowable.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, batched } => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                if *batched {
                    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    self.accumulate(a, |g| {
                        let mut da = g.zeros_like(a);
                        let bv = &g.value(b).data;
                        for i in 0..bs {
                            gemm_nt(m, n, k, &gy[i * m * n..], &bv[i * k * n..], &mut da[i * m * k..(i + 1) * m * k]);
                        }
                        da
                    });
                    self.accumulate(b, |g| {
                        let mut db = g.zeros_like(b);
                        let av = &g.value(a).data;
                        for i in 0..bs {
                            gemm_tn(m, k, n, &av[i * m * k..], &gy[i * m * n..], &mut db[i * k * n..(i + 1) * k * n]);
                        }
                        db
                    });
                } else {
                    let (k, n) = (sb[0], sb[1]);
                    let rows = self.value(a).len() / k.max(1);
                    self.accumulate(a, |g| {
                        let mut da = g.zeros_like(a);
                        gemm_nt(rows, n, k, gy, &g.value(b).data, &mut da);
                        da
                    });
                    self.accumulate(b, |g| {
                        let mut db = g.zeros_like(b);
                        gemm_tn(rows, k, n, &g.value(a).data, gy, &mut db);
                        db
                    });
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                let s = self.shape(a).to_vec();
                let r = s.len();
                let (m, n) = (s[r - 2], s[r - 1]);
                self.accumulate(a, |g| {
                    let mut da = g.zeros_like(a);
                    for b in 0..da.len() / (m * n).max(1) {
                        for i in 0..m {
                            for j in 0..n {
                                da[b * m * n + i * n + j] = gy[b * m * n + j * m + i];
                            }
                        }
                    }
                    da
                });
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |_| gy.to_vec());
                self.accumulate(b, |g| {
                    let mut db = g.zeros_like(b);
                    for chunk in gy.chunks(db.len().max(1)) {
                        add_into(&mut db, chunk);
                    }
                    db
                });
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |g| gy.iter().zip(&g.value(b).data).map(|(&d, &y)| d * y).collect());
                self.accumulate(b, |g| gy.iter().zip(&g.value(a).data).map(|(&d, &x)| d * x).collect());
            }
            Op::Scale { a, s } => {
                let s = *s;
                self.accumulate(*a, |_| gy.iter().map(|&d| d * s).collect());
            }
            Op::Softmax(a) => {
                let a = *a;
                let y = self.nodes[idx].value.data.clone();
                let d = self.value(a).last_dim().max(1);
                self.accumulate(a, |_| {
                    let mut da = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(d).zip(gy.chunks(d)) {
                        let s = yr.iter().zip(gr).fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        da.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - s)));
                    }
                    da
                });
            }
            Op::LogSoftmax(a) => {
                let a = *a;
                let y = self.nodes[idx].value.data.clone();
                let d = self.value(a).last_dim().max(1);
                self.accumulate(a, |_| {
                    let mut da = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(d).zip(gy.chunks(d)) {
                        let s = gr.iter().fold(T::zero(), |acc, &gv| acc + gv);
                        da.extend(yr.iter().zip(gr).map(|(&yv, &gv)| gv - yv.exp() * s));
                    }
                    da
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = self.value(x).last_dim().max(1);
                let n = T::c(d as f64);
                self.accumulate(x, |g| {
                    let gv = &g.value(gain).data;
                    let mut dx = Vec::with_capacity(xhat.len());
                    for (r, (hr, gr)) in xhat.chunks(d).zip(gy.chunks(d)).enumerate() {
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_h = dh.iter().zip(hr).fold(T::zero(), |acc, (&a, &b)| acc + a * b) / n;
                        dx.extend(dh.iter().zip(hr).map(|(&a, &h)| rstd[r] * (a - mean_dh - h * mean_dh_h)));
                    }
                    dx
                });
                self.accumulate(gain, |_| {
                    let mut dg = vec![T::zero(); d];
                    for (hr, gr) in xhat.chunks(d).zip(gy.chunks(d)) {
                        for i in 0..d {
                            dg[i] = dg[i] + hr[i] * gr[i];
                        }
                    }
                    dg
                });
                self.accumulate(bias, |_| {
                    let mut db = vec![T::zero(); d];
                    for gr in gy.chunks(d) {
                        add_into(&mut db, gr);
                    }
                    db
                });
            }
            Op::Relu(a) => {
                let a = *a;
                self.accumulate(a, |g| {
                    g.value(a).data.iter().zip(gy).map(|(&x, &d)| if x > T::zero() { d } else { T::zero() }).collect()
                });
            }
            Op::Gelu(a) => {
                let a = *a;
                self.accumulate(a, |g| g.value(a).data.iter().zip(gy).map(|(&x, &d)| d * gelu_parts(x).1).collect());
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let d = self.value(table).last_dim();
                self.accumulate(table, |g| {
                    let mut dt = g.zeros_like(table);
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &gy[i * d..(i + 1) * d]);
                    }
                    dt
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let logits = *logits;
                let v = self.value(logits).last_dim();
                let scale = gy[0] / T::c(*count as f64);
                self.accumulate(logits, |g| {
                    let mut dl = g.zeros_like(logits);
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for j in 0..v {
                            dl[r * v + j] = probs[r * v + j] * scale;
                        }
                        dl[r * v + t] = dl[r * v + t] - scale;
                    }
                    dl
                });
            }
            Op::Dropout { a, mask } => {
                self.accumulate(*a, |_| gy.iter().zip(mask).map(|(&d, &m)| d * m).collect());
            }
            Op::CausalMask(a) | Op::Reshape(a) => self.accumulate(*a, |_| gy.to_vec()),
            Op::SplitHeads { a, heads } => {
                let (a, heads) = (*a, *heads);
                let s = self.shape(a).to_vec();
                let (b, l, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                self.accumulate(a, |g| {
                    let mut da = g.zeros_like(a);
                    for bi in 0..b {
                        for t in 0..l {
                            for h in 0..heads {
                                let to = (bi * l + t) * d + h * dh;
                                let from = ((bi * heads + h) * l + t) * dh;
                                add_into(&mut da[to..to + dh], &gy[from..from + dh]);
                            }
                        }
                    }
                    da
                });
            }
            Op::MergeHeads { a, heads } => {
                let (a, heads) = (*a, *heads);
                let s = self.shape(a).to_vec();
                let (bh, l, dh) = (s[0], s[1], s[2]);
                let (b, d) = (bh / heads, dh * heads);
                self.accumulate(a, |g| {
                    let mut da = g.zeros_like(a);
                    for bi in 0..b {
                        for t in 0..l {
                            for h in 0..heads {
                                let from = (bi * l + t) * d + h * dh;
                                let to = ((bi * heads + h) * l + t) * dh;
                                add_into(&mut da[to..to + dh], &gy[from..from + dh]);
                            }
                        }
                    }
                    da
                });
            }
            Op::Sum(a) => {
                let a = *a;
                self.accumulate(a, |g| vec![gy[0]; g.value(a).len()]);
            }
        }
        self.nodes[idx].op = op;
    }
}

/// Per-row negative log-likelihoods (None for ignored rows), computed
/// outside any graph.
pub fn row_nll<T: Scalar>(logits: &Tensor<T>, targets: &[Option<usize>]) -> Vec<Option<f64>> {
    let v = logits.last_dim();
    targets
        .iter()
        .enumerate()
        .map(|(r, t)| {
            t.map(|t| {
                let row = &logits.data[r * v..(r + 1) * v];
                (log_sum_exp(row) - row[t]).to_f64().unwrap_or(f64::NAN)
            })
        })
        .collect()
}
