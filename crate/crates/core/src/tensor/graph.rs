//! Reverse-mode tape with multiply-accumulate instrumentation.
//!
//! Every op charges a multiply count that depends only on operand shapes:
//!
//! | op                                   | charge                                  |
//! |--------------------------------------|-----------------------------------------|
//! | `matmul`, `matmul_t` (m×k · k×n)     | m·k·n                                   |
//! | `head_scores` / `head_mix`           | H·n·m·d_head                            |
//! | `add`/`sub`/`mul`/`div` (broadcast)  | 1 per output element                    |
//! | `scale`, `add_scalar`                | 1 per element                           |
//! | `relu`/`gelu`/`tanh`/`sigmoid`/`exp`/`log` | 1 per element                     |
//! | `softmax`                            | 2 per element                           |
//! | `rms_norm`                           | 3 per element                           |
//! | `sum_all`, `sum_axis`                | 1 per input element                     |
//! | `depthwise_conv1d` (n×d, width w)    | n·d·w                                   |
//! | `conv1d` (n×c_in → c_out, width w)   | n·w·c_in·c_out                          |
//! | `mean_pool_stride2`                  | 1 per input element                     |
//! | `linear_attention` (per head)        | m·dk·dv + m·dk + n·dk·dv + n·dk + n + n·dv |
//! | `cross_entropy`                      | 2 per logit                             |
//! | gathers, scatters, reshapes, slices, concatenation | 0                         |

use std::collections::{BTreeMap, HashMap};

use super::array::Tensor;
use super::float::{gemm, Float, MatMut, MatRef};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Zero-padding convention for 1-D convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output position `i` sees inputs `i-w+1 ..= i`.
    Causal,
    /// Centered window; `(w-1)/2` zeros on the left.
    Same,
}

impl Padding {
    fn left(self, width: usize) -> usize {
        match self {
            Padding::Causal => width - 1,
            Padding::Same => (width - 1) / 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    HeadScores { q: Var, k: Var, heads: usize },
    HeadMix { w: Var, v: Var, heads: usize },
    Binary { kind: BinaryKind, a: Var, b: Var },
    Scale { x: Var, factor: T },
    AddScalar { x: Var },
    Unary { kind: UnaryKind, x: Var },
    Softmax { axis: usize, x: Var },
    RmsNorm { x: Var, scale: Var, inv_rms: Vec<T> },
    Embed { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, index: Vec<Option<usize>> },
    ScatterRows { x: Var, index: Vec<Option<usize>> },
    RelBias { table: Var, buckets: Vec<usize> },
    Reshape { x: Var },
    Transpose { x: Var },
    SliceCols { x: Var, start: usize },
    PadCols { x: Var },
    ConcatRows { parts: Vec<Var> },
    SumAll { x: Var },
    SumAxis { x: Var, axis: usize },
    DepthwiseConv { x: Var, kernel: Var, pad_left: usize },
    Conv1d { x: Var, weight: Var, pad_left: usize },
    MeanPool2 { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    LinearAttention { q: Var, k: Var, v: Var, heads: usize, causal: bool, eps: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::HeadScores { .. } => "head_scores",
            Op::HeadMix { .. } => "head_mix",
            Op::Binary { .. } => "binary",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Unary { .. } => "unary",
            Op::Softmax { .. } => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Embed { .. } => "embed",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::RelBias { .. } => "rel_bias",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SumAll { .. } => "sum_all",
            Op::SumAxis { .. } => "sum_axis",
            Op::DepthwiseConv { .. } => "depthwise_conv1d",
            Op::Conv1d { .. } => "conv1d",
            Op::MeanPool2 { .. } => "mean_pool_stride2",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::LinearAttention { .. } => "linear_attention",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

/// A single-threaded computation tape.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    multiply_count: u64,
    scope: String,
    scoped_counts: BTreeMap<String, u64>,
    params: HashMap<usize, Var>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            multiply_count: 0,
            scope: String::new(),
            scoped_counts: BTreeMap::new(),
            params: HashMap::new(),
        }
    }

    /// Cumulative scalar multiply-accumulates charged so far.
    pub fn multiply_count(&self) -> u64 {
        self.multiply_count
    }

    /// Multiply counts broken down by the scope label active when each op ran.
    pub fn scoped_counts(&self) -> &BTreeMap<String, u64> {
        &self.scoped_counts
    }

    /// Sets the label charged by subsequent ops and returns the previous one.
    pub fn set_scope(&mut self, scope: &str) -> String {
        std::mem::replace(&mut self.scope, scope.to_string())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op names in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn charge(&mut self, count: u64) {
        self.multiply_count += count;
        *self.scoped_counts.entry(self.scope.clone()).or_insert(0) += count;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf not tied to a model parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Binds model parameter `index`, reusing the leaf if already bound.
    pub fn param(&mut self, index: usize, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&index) {
            return v;
        }
        self.nodes.push(Node { value: value.clone(), op: Op::Leaf, requires_grad: true, param: Some(index) });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(index, v);
        v
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::rm(self.value(a).data(), m, k),
            MatRef::rm(self.value(b).data(), k, n),
            T::zero(),
            MatMut::rm(&mut out, m, n),
        );
        self.charge((m * k * n) as u64);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, b_transposed: false }, &[a, b]))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim(format!("matmul_t {:?} x {:?}ᵀ", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::rm(self.value(a).data(), m, k),
            MatRef::rm_t(self.value(b).data(), n, k),
            T::zero(),
            MatMut::rm(&mut out, m, n),
        );
        self.charge((m * k * n) as u64);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, b_transposed: true }, &[a, b]))
    }

    fn head_dims(&self, x: Var, heads: usize) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 || heads == 0 || s[1] % heads != 0 {
            return Err(Error::dim(format!("{:?} cannot be split into {} heads", s, heads)));
        }
        Ok((s[0], s[1] / heads))
    }

    /// Per-head `q_h · k_hᵀ` for `q[n×H·dk]`, `k[m×H·dk]`; result `[H, n, m]`.
    pub fn head_scores(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        let (n, dk) = self.head_dims(q, heads)?;
        let (m, dk2) = self.head_dims(k, heads)?;
        if dk != dk2 {
            return Err(Error::dim("head_scores: head widths differ"));
        }
        let width = heads * dk;
        let mut out = vec![T::zero(); heads * n * m];
        for h in 0..heads {
            let qv = MatRef { data: self.value(q).data(), offset: h * dk, rows: n, cols: dk, rs: width, cs: 1 };
            let kv = MatRef { data: self.value(k).data(), offset: h * dk, rows: m, cols: dk, rs: width, cs: 1 };
            let ov = MatMut { data: &mut out, offset: h * n * m, rows: n, cols: m, rs: m, cs: 1 };
            gemm(T::one(), qv, kv.t(), T::zero(), ov);
        }
        self.charge((heads * n * m * dk) as u64);
        Ok(self.push(Tensor::new(vec![heads, n, m], out)?, Op::HeadScores { q, k, heads }, &[q, k]))
    }

    /// Per-head `w_h · v_h` for `w[H, n, m]`, `v[m×H·dv]`; result `[n × H·dv]`.
    pub fn head_mix(&mut self, w: Var, v: Var, heads: usize) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        let (m, dv) = self.head_dims(v, heads)?;
        if sw.len() != 3 || sw[0] != heads || sw[2] != m {
            return Err(Error::dim(format!("head_mix weights {:?} vs values [{}, {}]", sw, m, heads * dv)));
        }
        let n = sw[1];
        let width = heads * dv;
        let mut out = vec![T::zero(); n * width];
        for h in 0..heads {
            let wv = MatRef { data: self.value(w).data(), offset: h * n * m, rows: n, cols: m, rs: m, cs: 1 };
            let vv = MatRef { data: self.value(v).data(), offset: h * dv, rows: m, cols: dv, rs: width, cs: 1 };
            let ov = MatMut { data: &mut out, offset: h * dv, rows: n, cols: dv, rs: width, cs: 1 };
            gemm(T::one(), wv, vv, T::zero(), ov);
        }
        self.charge((heads * n * m * dv) as u64);
        Ok(self.push(Tensor::new(vec![n, width], out)?, Op::HeadMix { w, v, heads }, &[w, v]))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let numel: usize = out_shape.iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<T> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(numel);
            let stra = broadcast_strides(&sa, &out_shape);
            let strb = broadcast_strides(&sb, &out_shape);
            for_each_broadcast(&out_shape, &stra, &strb, |_, ia, ib| out.push(f(av[ia], bv[ib])));
            out
        };
        self.charge(numel as u64);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Binary { kind, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::lit(factor);
        let value = self.value(x).map(|v| v * factor);
        self.charge(value.numel() as u64);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let value = self.value(x).map(|v| v + c);
        self.charge(value.numel() as u64);
        self.push(value, Op::AddScalar { x }, &[x])
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let tiny = T::min_positive_value();
        let value = self.value(x).map(|v| match kind {
            UnaryKind::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            UnaryKind::Gelu => gelu(v),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.max(tiny).ln(),
        });
        self.charge(value.numel() as u64);
        self.push(value, Op::Unary { kind, x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    /// Natural log, clamped below at the smallest positive normal value.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {} on rank-{} tensor", axis, shape.len())));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(xv[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (xv[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                let inv = T::one() / sum;
                for j in 0..len {
                    out[base + j * inner] *= inv;
                }
            }
        }
        self.charge(2 * out.len() as u64);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { axis, x }, &[x]))
    }

    /// Scale-only RMS normalization over the last axis.
    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("rms_norm on scalar"))?;
        if self.shape(scale) != [d] {
            return Err(Error::dim(format!("rms_norm scale {:?} for width {}", self.shape(scale), d)));
        }
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let rows = xv.len() / d.max(1);
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        let dn = T::lit(d as f64);
        let eps = T::lit(eps);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for c in 0..d {
                out[r * d + c] = row[c] * inv * sv[c];
            }
        }
        self.charge(3 * out.len() as u64);
        Ok(self.push(Tensor::new(shape, out)?, Op::RmsNorm { x, scale, inv_rms }, &[x, scale]))
    }

    // ---------------------------------------------------------------- indexing

    /// Row lookup `table[ids[i]]`.
    pub fn embed(&mut self, ids: &[usize], table: Var) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("embedding table must be 2-D"));
        }
        let (vocab, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!("token id {} out of range for vocab {}", bad, vocab)));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(Tensor::new(vec![ids.len(), d], out)?, Op::Embed { table, ids: ids.to_vec() }, &[table]))
    }

    /// Output row `r` is `x[index[r]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("gather_rows expects a matrix"));
        }
        let (n, d) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); index.len() * d];
        for (r, ix) in index.iter().enumerate() {
            if let Some(i) = *ix {
                if i >= n {
                    return Err(Error::dim(format!("gather row {} of {}", i, n)));
                }
                out[r * d..(r + 1) * d].copy_from_slice(&xv[i * d..(i + 1) * d]);
            }
        }
        Ok(self.push(Tensor::new(vec![index.len(), d], out)?, Op::GatherRows { x, index: index.to_vec() }, &[x]))
    }

    /// Adds row `r` of `x` into output row `index[r]` of an `n_out`-row zero matrix.
    pub fn scatter_rows(&mut self, x: Var, index: &[Option<usize>], n_out: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != index.len() {
            return Err(Error::dim("scatter_rows index length must match rows"));
        }
        let d = s[1];
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n_out * d];
        for (r, ix) in index.iter().enumerate() {
            if let Some(i) = *ix {
                if i >= n_out {
                    return Err(Error::dim(format!("scatter row {} of {}", i, n_out)));
                }
                for c in 0..d {
                    out[i * d + c] += xv[r * d + c];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![n_out, d], out)?, Op::ScatterRows { x, index: index.to_vec() }, &[x]))
    }

    /// Expands a `[buckets × H]` table into `[H, n, m]` via a bucket id per position pair.
    pub fn rel_bias(&mut self, table: Var, buckets: &[usize], n: usize, m: usize) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || buckets.len() != n * m {
            return Err(Error::dim("rel_bias table/bucket mismatch"));
        }
        let (nb, h) = (s[0], s[1]);
        if buckets.iter().any(|&b| b >= nb) {
            return Err(Error::dim("bucket id out of range"));
        }
        let tv = self.value(table).data();
        let mut out = vec![T::zero(); h * n * m];
        for head in 0..h {
            for (p, &b) in buckets.iter().enumerate() {
                out[head * n * m + p] = tv[b * h + head];
            }
        }
        Ok(self.push(Tensor::new(vec![h, n, m], out)?, Op::RelBias { table, buckets: buckets.to_vec() }, &[table]))
    }

    // ---------------------------------------------------------------- shape

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("transpose expects a matrix"));
        }
        let out = transpose_data(self.value(x).data(), s[0], s[1]);
        Ok(self.push(Tensor::new(vec![s[1], s[0]], out)?, Op::Transpose { x }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::dim(format!("slice_cols {}..{} of {:?}", start, start + len, s)));
        }
        let (n, c) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xv[r * c + start..r * c + start + len]);
        }
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols { x, start }, &[x]))
    }

    /// Right-pads columns with zeros up to `total`.
    pub fn pad_cols(&mut self, x: Var, total: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || total < s[1] {
            return Err(Error::dim("pad_cols target narrower than input"));
        }
        let (n, c) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * total];
        for r in 0..n {
            out[r * total..r * total + c].copy_from_slice(&xv[r * c..(r + 1) * c]);
        }
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::PadCols { x }, &[x]))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_rows of nothing"))?;
        let cols = self.shape(*first).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::dim(format!("concat_rows part {:?} vs {} columns", s, cols)));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.charge(self.value(x).numel() as u64);
        self.push(Tensor::scalar(total), Op::SumAll { x }, &[x])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis out of range"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv[(o * len + j) * inner + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.charge(xv.len() as u64);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { x, axis }, &[x]))
    }

    // ---------------------------------------------------------------- sequence ops

    /// Depthwise 1-D convolution over `x[n×d]`.
    ///
    /// `kernel` is `[G × w]` (shared over positions) or `[n × G × w]` (one kernel per
    /// position); channel `c` uses group `c / (d / G)`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 2 {
            return Err(Error::dim("depthwise_conv1d input must be [n×d]"));
        }
        let (n, d) = (sx[0], sx[1]);
        let (dynamic, groups, width) = match sk.len() {
            2 => (false, sk[0], sk[1]),
            3 if sk[0] == n => (true, sk[1], sk[2]),
            _ => return Err(Error::dim(format!("kernel {:?} for input {:?}", sk, sx))),
        };
        if groups == 0 || width == 0 || d % groups != 0 {
            return Err(Error::dim(format!("{} channels not divisible into {} groups", d, groups)));
        }
        let per_group = d / groups;
        let pad = padding.left(width);
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let kbase = if dynamic { i * groups * width } else { 0 };
            for t in 0..width {
                let src = i as isize + t as isize - pad as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let src = src as usize;
                for c in 0..d {
                    let g = c / per_group;
                    out[i * d + c] += kv[kbase + g * width + t] * xv[src * d + c];
                }
            }
        }
        self.charge((n * d * width) as u64);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::DepthwiseConv { x, kernel, pad_left: pad }, &[x, kernel]))
    }

    /// Dense 1-D convolution: `x[n×c_in]`, `weight[w × c_in × c_out]`.
    pub fn conv1d(&mut self, x: Var, weight: Var, padding: Padding) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[1] {
            return Err(Error::dim(format!("conv1d input {:?} weight {:?}", sx, sw)));
        }
        let (n, cin) = (sx[0], sx[1]);
        let (width, cout) = (sw[0], sw[2]);
        let pad = padding.left(width);
        let mut out = vec![T::zero(); n * cout];
        {
            let xv = self.value(x).data();
            let wv = self.value(weight).data();
            for t in 0..width {
                let Some((o0, i0, rows)) = tap_range(n, t, pad) else { continue };
                let a = MatRef { data: xv, offset: i0 * cin, rows, cols: cin, rs: cin, cs: 1 };
                let b = MatRef { data: wv, offset: t * cin * cout, rows: cin, cols: cout, rs: cout, cs: 1 };
                let c = MatMut { data: &mut out, offset: o0 * cout, rows, cols: cout, rs: cout, cs: 1 };
                gemm(T::one(), a, b, T::one(), c);
            }
        }
        self.charge((n * width * cin * cout) as u64);
        Ok(self.push(Tensor::new(vec![n, cout], out)?, Op::Conv1d { x, weight, pad_left: pad }, &[x, weight]))
    }

    /// Averages non-overlapping row pairs; an odd trailing row is kept as is.
    pub fn mean_pool_stride2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("mean_pool_stride2 expects [n×d]"));
        }
        let (n, d) = (s[0], s[1]);
        let n_out = n.div_ceil(2);
        let xv = self.value(x).data();
        let half = T::lit(0.5);
        let mut out = vec![T::zero(); n_out * d];
        for r in 0..n_out {
            let a = 2 * r;
            for c in 0..d {
                out[r * d + c] = if a + 1 < n { (xv[a * d + c] + xv[(a + 1) * d + c]) * half } else { xv[a * d + c] };
            }
        }
        self.charge((n * d) as u64);
        Ok(self.push(Tensor::new(vec![n_out, d], out)?, Op::MeanPool2 { x }, &[x]))
    }

    /// Mean token cross-entropy of `logits[n×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(Error::dim(format!("cross_entropy logits {:?} vs {} targets", s, targets.len())));
        }
        let (n, v) = (s[0], s[1]);
        if targets.iter().any(|&t| t >= v) {
            return Err(Error::Input("target id out of range".into()));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * v];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &lv[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for c in 0..v {
                let e = (row[c] - mx).exp();
                probs[r * v + c] = e;
                sum += e;
            }
            for c in 0..v {
                probs[r * v + c] /= sum;
            }
            loss += sum.ln() + mx - row[targets[r]];
        }
        loss /= T::lit(n as f64);
        self.charge(2 * (n * v) as u64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    /// Kernelized attention with nonnegative features already applied:
    /// `out_i = q_i·S / (q_i·z + eps)`, `S = Σ_j k_jᵀ v_j`, `z = Σ_j k_j`,
    /// where the sums run over `j ≤ i` when `causal`.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool, eps: f64) -> Result<Var> {
        let (n, dk) = self.head_dims(q, heads)?;
        let (m, dk2) = self.head_dims(k, heads)?;
        let (m2, dv) = self.head_dims(v, heads)?;
        if dk != dk2 || m != m2 || (causal && n != m) {
            return Err(Error::dim("linear_attention shape mismatch"));
        }
        let eps = T::lit(eps);
        let (qw, kw, vw) = (heads * dk, heads * dk, heads * dv);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); n * vw];
        let mut state = vec![T::zero(); dk * dv];
        let mut z = vec![T::zero(); dk];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dk, h * dk, h * dv);
            state.iter_mut().for_each(|s| *s = T::zero());
            z.iter_mut().for_each(|s| *s = T::zero());
            let absorb = |j: usize, state: &mut [T], z: &mut [T]| {
                for a in 0..dk {
                    let ka = kd[j * kw + ko + a];
                    z[a] += ka;
                    for c in 0..dv {
                        state[a * dv + c] += ka * vd[j * vw + vo + c];
                    }
                }
            };
            if !causal {
                for j in 0..m {
                    absorb(j, &mut state, &mut z);
                }
            }
            for i in 0..n {
                if causal {
                    absorb(i, &mut state, &mut z);
                }
                let mut den = T::zero();
                for a in 0..dk {
                    den += qd[i * qw + qo + a] * z[a];
                }
                den += eps;
                for c in 0..dv {
                    let mut num = T::zero();
                    for a in 0..dk {
                        num += qd[i * qw + qo + a] * state[a * dv + c];
                    }
                    out[i * vw + vo + c] = num / den;
                }
            }
        }
        let per_head = m * dk * dv + m * dk + n * dk * dv + n * dk + n + n * dv;
        self.charge((heads * per_head) as u64);
        Ok(self.push(
            Tensor::new(vec![n, vw], out)?,
            Op::LinearAttention { q, k, v, heads, causal, eps },
            &[q, k, v],
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss is not on this tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut params = BTreeMap::new();
        let mut kept = Vec::with_capacity(grads.len());
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(p), Some(t)) = (self.nodes[i].param, g.as_ref()) {
                params.insert(p, t.clone());
            }
            kept.push(g);
        }
        Ok(Gradients { grads: kept, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape for {}", self.nodes[v.0].op.name());
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a);
                let (m, k) = (sa[0], sa[1]);
                let n = node.value.shape()[1];
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.needs(a) {
                    let mut ga = vec![T::zero(); m * k];
                    // b is [k×n] (or [n×k] when transposed); ga = g · bᵀ
                    let bt = if *b_transposed { MatRef::rm(bv, n, k) } else { MatRef::rm_t(bv, k, n) };
                    gemm(T::one(), MatRef::rm(gd, m, n), bt, T::zero(), MatMut::rm(&mut ga, m, k));
                    self.accumulate(grads, a, Tensor::new(vec![m, k], ga)?);
                }
                if self.needs(b) {
                    if *b_transposed {
                        let mut gb = vec![T::zero(); n * k];
                        gemm(T::one(), MatRef::rm_t(gd, m, n), MatRef::rm(av, m, k), T::zero(), MatMut::rm(&mut gb, n, k));
                        self.accumulate(grads, b, Tensor::new(vec![n, k], gb)?);
                    } else {
                        let mut gb = vec![T::zero(); k * n];
                        gemm(T::one(), MatRef::rm_t(av, m, k), MatRef::rm(gd, m, n), T::zero(), MatMut::rm(&mut gb, k, n));
                        self.accumulate(grads, b, Tensor::new(vec![k, n], gb)?);
                    }
                }
            }
            Op::HeadScores { q, k, heads } => {
                let (q, k, heads) = (*q, *k, *heads);
                let (n, dk) = self.head_dims(q, heads)?;
                let m = self.shape(k)[0];
                let width = heads * dk;
                let qv = self.value(q).data();
                let kv = self.value(k).data();
                if self.needs(q) {
                    let mut gq = vec![T::zero(); n * width];
                    for h in 0..heads {
                        let gh = MatRef { data: gd, offset: h * n * m, rows: n, cols: m, rs: m, cs: 1 };
                        let kh = MatRef { data: kv, offset: h * dk, rows: m, cols: dk, rs: width, cs: 1 };
                        let out = MatMut { data: &mut gq, offset: h * dk, rows: n, cols: dk, rs: width, cs: 1 };
                        gemm(T::one(), gh, kh, T::zero(), out);
                    }
                    self.accumulate(grads, q, Tensor::new(vec![n, width], gq)?);
                }
                if self.needs(k) {
                    let mut gk = vec![T::zero(); m * width];
                    for h in 0..heads {
                        let gh = MatRef { data: gd, offset: h * n * m, rows: n, cols: m, rs: m, cs: 1 };
                        let qh = MatRef { data: qv, offset: h * dk, rows: n, cols: dk, rs: width, cs: 1 };
                        let out = MatMut { data: &mut gk, offset: h * dk, rows: m, cols: dk, rs: width, cs: 1 };
                        gemm(T::one(), gh.t(), qh, T::zero(), out);
                    }
                    self.accumulate(grads, k, Tensor::new(vec![m, width], gk)?);
                }
            }
            Op::HeadMix { w, v, heads } => {
                let (w, v, heads) = (*w, *v, *heads);
                let sw = self.shape(w);
                let (n, m) = (sw[1], sw[2]);
                let dv = self.shape(v)[1] / heads;
                let width = heads * dv;
                let wv = self.value(w).data();
                let vv = self.value(v).data();
                if self.needs(w) {
                    let mut gw = vec![T::zero(); heads * n * m];
                    for h in 0..heads {
                        let gh = MatRef { data: gd, offset: h * dv, rows: n, cols: dv, rs: width, cs: 1 };
                        let vh = MatRef { data: vv, offset: h * dv, rows: m, cols: dv, rs: width, cs: 1 };
                        let out = MatMut { data: &mut gw, offset: h * n * m, rows: n, cols: m, rs: m, cs: 1 };
                        gemm(T::one(), gh, vh.t(), T::zero(), out);
                    }
                    self.accumulate(grads, w, Tensor::new(vec![heads, n, m], gw)?);
                }
                if self.needs(v) {
                    let mut gv = vec![T::zero(); m * width];
                    for h in 0..heads {
                        let wh = MatRef { data: wv, offset: h * n * m, rows: n, cols: m, rs: m, cs: 1 };
                        let gh = MatRef { data: gd, offset: h * dv, rows: n, cols: dv, rs: width, cs: 1 };
                        let out = MatMut { data: &mut gv, offset: h * dv, rows: m, cols: dv, rs: width, cs: 1 };
                        gemm(T::one(), wh.t(), gh, T::zero(), out);
                    }
                    self.accumulate(grads, v, Tensor::new(vec![m, width], gv)?);
                }
            }
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let out_shape = node.value.shape().to_vec();
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                let stra = broadcast_strides(&sa, &out_shape);
                let strb = broadcast_strides(&sb, &out_shape);
                for_each_broadcast(&out_shape, &stra, &strb, |o, ia, ib| {
                    let go = gd[o];
                    match kind {
                        BinaryKind::Add => {
                            ga[ia] += go;
                            gb[ib] += go;
                        }
                        BinaryKind::Sub => {
                            ga[ia] += go;
                            gb[ib] -= go;
                        }
                        BinaryKind::Mul => {
                            ga[ia] += go * bv[ib];
                            gb[ib] += go * av[ia];
                        }
                        BinaryKind::Div => {
                            ga[ia] += go / bv[ib];
                            gb[ib] -= go * av[ia] / (bv[ib] * bv[ib]);
                        }
                    }
                });
                self.accumulate(grads, a, Tensor::new(sa, ga)?);
                self.accumulate(grads, b, Tensor::new(sb, gb)?);
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::AddScalar { x } => self.accumulate(grads, *x, g.clone()),
            Op::Unary { kind, x } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let tiny = T::min_positive_value();
                let out: Vec<T> = (0..xv.len())
                    .map(|i| {
                        let (xi, yi) = (xv[i], yv[i]);
                        let d = match kind {
                            UnaryKind::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Gelu => gelu_grad(xi),
                            UnaryKind::Tanh => T::one() - yi * yi,
                            UnaryKind::Sigmoid => yi * (T::one() - yi),
                            UnaryKind::Exp => yi,
                            UnaryKind::Log => {
                                if xi > tiny {
                                    T::one() / xi
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        gd[i] * d
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv_shape(self, *x), out)?);
            }
            Op::Softmax { axis, x } => {
                let shape = node.value.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += gd[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] = y[p] * (gd[p] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx)?);
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let (x, scale) = (*x, *scale);
                let shape = self.shape(x).to_vec();
                let d = *shape.last().unwrap_or(&1);
                let xv = self.value(x).data();
                let sv = self.value(scale).data();
                let rows = xv.len() / d.max(1);
                let mut gx = vec![T::zero(); xv.len()];
                let mut gs = vec![T::zero(); d];
                let dn = T::lit(d as f64);
                for r in 0..rows {
                    let inv = inv_rms[r];
                    let mut dot = T::zero();
                    for c in 0..d {
                        let p = r * d + c;
                        let xh = xv[p] * inv;
                        gs[c] += gd[p] * xh;
                        dot += gd[p] * sv[c] * xh;
                    }
                    let mean = dot / dn;
                    for c in 0..d {
                        let p = r * d + c;
                        let xh = xv[p] * inv;
                        gx[p] = inv * (gd[p] * sv[c] - xh * mean);
                    }
                }
                self.accumulate(grads, x, Tensor::new(shape, gx)?);
                self.accumulate(grads, scale, Tensor::new(vec![d], gs)?);
            }
            Op::Embed { table, ids } => {
                if self.needs(*table) {
                    let s = self.shape(*table).to_vec();
                    let d = s[1];
                    let mut gt = vec![T::zero(); s[0] * d];
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] += gd[r * d + c];
                        }
                    }
                    self.accumulate(grads, *table, Tensor::new(s, gt)?);
                }
            }
            Op::GatherRows { x, index } => {
                let s = self.shape(*x).to_vec();
                let d = s[1];
                let mut gx = vec![T::zero(); s[0] * d];
                for (r, ix) in index.iter().enumerate() {
                    if let Some(i) = *ix {
                        for c in 0..d {
                            gx[i * d + c] += gd[r * d + c];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, gx)?);
            }
            Op::ScatterRows { x, index } => {
                let s = self.shape(*x).to_vec();
                let d = s[1];
                let mut gx = vec![T::zero(); s[0] * d];
                for (r, ix) in index.iter().enumerate() {
                    if let Some(i) = *ix {
                        gx[r * d..(r + 1) * d].copy_from_slice(&gd[i * d..(i + 1) * d]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, gx)?);
            }
            Op::RelBias { table, buckets } => {
                let s = self.shape(*table).to_vec();
                let h = s[1];
                let nm = buckets.len();
                let mut gt = vec![T::zero(); s[0] * h];
                for head in 0..h {
                    for (p, &b) in buckets.iter().enumerate() {
                        gt[b * h + head] += gd[head * nm + p];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(s, gt)?);
            }
            Op::Reshape { x } => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape)?);
            }
            Op::Transpose { x } => {
                let s = self.shape(*x).to_vec();
                let out = transpose_data(gd, s[1], s[0]);
                self.accumulate(grads, *x, Tensor::new(s, out)?);
            }
            Op::SliceCols { x, start } => {
                let s = self.shape(*x).to_vec();
                let (n, c) = (s[0], s[1]);
                let len = node.value.shape()[1];
                let mut gx = vec![T::zero(); n * c];
                for r in 0..n {
                    gx[r * c + start..r * c + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::new(s, gx)?);
            }
            Op::PadCols { x } => {
                let s = self.shape(*x).to_vec();
                let (n, c) = (s[0], s[1]);
                let total = node.value.shape()[1];
                let mut gx = Vec::with_capacity(n * c);
                for r in 0..n {
                    gx.extend_from_slice(&gd[r * total..r * total + c]);
                }
                self.accumulate(grads, *x, Tensor::new(s, gx)?);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let s = self.shape(*p).to_vec();
                    let len = s[0] * s[1];
                    if self.needs(*p) {
                        self.accumulate(grads, *p, Tensor::new(s, gd[offset..offset + len].to_vec())?);
                    }
                    offset += len;
                }
            }
            Op::SumAll { x } => {
                let s = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(s, gd[0]));
            }
            Op::SumAxis { x, axis } => {
                let s = self.shape(*x).to_vec();
                let (outer, len, inner) = axis_split(&s, *axis);
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[(o * len + j) * inner + i] = gd[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, gx)?);
            }
            Op::DepthwiseConv { x, kernel, pad_left } => {
                let (x, kernel, pad) = (*x, *kernel, *pad_left);
                let sx = self.shape(x).to_vec();
                let sk = self.shape(kernel).to_vec();
                let (n, d) = (sx[0], sx[1]);
                let dynamic = sk.len() == 3;
                let (groups, width) = if dynamic { (sk[1], sk[2]) } else { (sk[0], sk[1]) };
                let per_group = d / groups;
                let xv = self.value(x).data();
                let kv = self.value(kernel).data();
                let mut gx = vec![T::zero(); n * d];
                let mut gk = vec![T::zero(); kv.len()];
                for i in 0..n {
                    let kbase = if dynamic { i * groups * width } else { 0 };
                    for t in 0..width {
                        let src = i as isize + t as isize - pad as isize;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..d {
                            let kidx = kbase + (c / per_group) * width + t;
                            let go = gd[i * d + c];
                            gx[src * d + c] += go * kv[kidx];
                            gk[kidx] += go * xv[src * d + c];
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(sx, gx)?);
                self.accumulate(grads, kernel, Tensor::new(sk, gk)?);
            }
            Op::Conv1d { x, weight, pad_left } => {
                let (x, weight, pad) = (*x, *weight, *pad_left);
                let sx = self.shape(x).to_vec();
                let sw = self.shape(weight).to_vec();
                let (n, cin) = (sx[0], sx[1]);
                let (width, cout) = (sw[0], sw[2]);
                let xv = self.value(x).data();
                let wv = self.value(weight).data();
                let mut gx = vec![T::zero(); n * cin];
                let mut gw = vec![T::zero(); wv.len()];
                for t in 0..width {
                    let Some((o0, i0, rows)) = tap_range(n, t, pad) else { continue };
                    let g_rows = MatRef { data: gd, offset: o0 * cout, rows, cols: cout, rs: cout, cs: 1 };
                    let w_t = MatRef { data: wv, offset: t * cin * cout, rows: cin, cols: cout, rs: cout, cs: 1 };
                    let x_rows = MatRef { data: xv, offset: i0 * cin, rows, cols: cin, rs: cin, cs: 1 };
                    gemm(
                        T::one(),
                        g_rows,
                        w_t.t(),
                        T::one(),
                        MatMut { data: &mut gx, offset: i0 * cin, rows, cols: cin, rs: cin, cs: 1 },
                    );
                    gemm(
                        T::one(),
                        x_rows.t(),
                        g_rows,
                        T::one(),
                        MatMut { data: &mut gw, offset: t * cin * cout, rows: cin, cols: cout, rs: cout, cs: 1 },
                    );
                }
                self.accumulate(grads, x, Tensor::new(sx, gx)?);
                self.accumulate(grads, weight, Tensor::new(sw, gw)?);
            }
            Op::MeanPool2 { x } => {
                let s = self.shape(*x).to_vec();
                let (n, d) = (s[0], s[1]);
                let half = T::lit(0.5);
                let mut gx = vec![T::zero(); n * d];
                for r in 0..n.div_ceil(2) {
                    let a = 2 * r;
                    for c in 0..d {
                        let go = gd[r * d + c];
                        if a + 1 < n {
                            gx[a * d + c] = go * half;
                            gx[(a + 1) * d + c] = go * half;
                        } else {
                            gx[a * d + c] = go;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, gx)?);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = self.shape(*logits).to_vec();
                let (n, v) = (s[0], s[1]);
                let scale = gd[0] / T::lit(n as f64);
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * v + t] -= T::one();
                }
                gl.iter_mut().for_each(|x| *x *= scale);
                self.accumulate(grads, *logits, Tensor::new(s, gl)?);
            }
            Op::LinearAttention { q, k, v, heads, causal, eps } => {
                let (gq, gk, gv) = self.linear_attention_grads(*q, *k, *v, *heads, *causal, *eps, gd)?;
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn linear_attention_grads(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        eps: T,
        gd: &[T],
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (n, dk) = self.head_dims(q, heads)?;
        let (m, dv) = self.head_dims(v, heads)?;
        let (kw, vw) = (heads * dk, heads * dv);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut gq = vec![T::zero(); n * kw];
        let mut gk = vec![T::zero(); m * kw];
        let mut gv = vec![T::zero(); m * vw];
        let mut state = vec![T::zero(); dk * dv];
        let mut z = vec![T::zero(); dk];
        // per-position upstream terms
        let mut dnum = vec![T::zero(); n * dv];
        let mut dden = vec![T::zero(); n];
        for h in 0..heads {
            let (ko, vo) = (h * dk, h * dv);
            state.iter_mut().for_each(|s| *s = T::zero());
            z.iter_mut().for_each(|s| *s = T::zero());
            let absorb = |j: usize, state: &mut [T], z: &mut [T]| {
                for a in 0..dk {
                    let ka = kd[j * kw + ko + a];
                    z[a] += ka;
                    for c in 0..dv {
                        state[a * dv + c] += ka * vd[j * vw + vo + c];
                    }
                }
            };
            if !causal {
                for j in 0..m {
                    absorb(j, &mut state, &mut z);
                }
            }
            // forward replay: dq and the per-position terms
            for i in 0..n {
                if causal {
                    absorb(i, &mut state, &mut z);
                }
                let qi = &qd[i * kw + ko..i * kw + ko + dk];
                let mut den = eps;
                for a in 0..dk {
                    den += qi[a] * z[a];
                }
                let mut go_dot_out = T::zero();
                for c in 0..dv {
                    let mut num = T::zero();
                    for a in 0..dk {
                        num += qi[a] * state[a * dv + c];
                    }
                    let go = gd[i * vw + vo + c];
                    dnum[i * dv + c] = go / den;
                    go_dot_out += go * num / den;
                }
                dden[i] = -go_dot_out / den;
                for a in 0..dk {
                    let mut acc = dden[i] * z[a];
                    for c in 0..dv {
                        acc += dnum[i * dv + c] * state[a * dv + c];
                    }
                    gq[i * kw + ko + a] = acc;
                }
            }
            // dS and dz: totals (non-causal) or suffix sums (causal)
            let mut ds = vec![T::zero(); dk * dv];
            let mut dz = vec![T::zero(); dk];
            let collect = |i: usize, ds: &mut [T], dz: &mut [T]| {
                for a in 0..dk {
                    let qa = qd[i * kw + ko + a];
                    dz[a] += dden[i] * qa;
                    for c in 0..dv {
                        ds[a * dv + c] += qa * dnum[i * dv + c];
                    }
                }
            };
            if !causal {
                for i in 0..n {
                    collect(i, &mut ds, &mut dz);
                }
            }
            for j in (0..m).rev() {
                if causal {
                    collect(j, &mut ds, &mut dz);
                }
                for a in 0..dk {
                    let mut acc = dz[a];
                    for c in 0..dv {
                        acc += ds[a * dv + c] * vd[j * vw + vo + c];
                    }
                    gk[j * kw + ko + a] = acc;
                }
                for c in 0..dv {
                    let mut acc = T::zero();
                    for a in 0..dk {
                        acc += kd[j * kw + ko + a] * ds[a * dv + c];
                    }
                    gv[j * vw + vo + c] = acc;
                }
            }
        }
        Ok((Tensor::new(vec![n, kw], gq)?, Tensor::new(vec![m, kw], gk)?, Tensor::new(vec![m, vw], gv)?))
    }
}

fn xv_shape<T: Float>(g: &Graph<T>, v: Var) -> Vec<usize> {
    g.shape(v).to_vec()
}

/// Gradients of one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<usize, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for model parameter `index`, if it took part in the graph.
    pub fn param(&self, index: usize) -> Option<&Tensor<T>> {
        self.params.get(&index)
    }

    pub fn params(&self) -> &BTreeMap<usize, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<usize, Tensor<T>> {
        self.params
    }
}

// -------------------------------------------------------------------- helpers

fn gelu<T: Float>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Output rows `[o0, o0+rows)` read input rows `[i0, i0+rows)` for tap `t`.
fn tap_range(n: usize, t: usize, pad: usize) -> Option<(usize, usize, usize)> {
    let offset = t as isize - pad as isize;
    let o0 = (-offset).max(0) as usize;
    let o1 = (n as isize - offset).min(n as isize);
    if o1 <= o0 as isize {
        return None;
    }
    let rows = o1 as usize - o0;
    Some((o0, (o0 as isize + offset) as usize, rows))
}

fn transpose_data<T: Float>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(format!("cannot broadcast {:?} with {:?}", a, b))),
        };
    }
    Ok(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}
