//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! A [`Tape`] borrows the model's [`ParamStore`] read-only, records every
//! primitive applied during a forward pass, and [`Tape::backward`] replays the
//! record in reverse, accumulating parameter gradients into a [`Gradients`]
//! buffer. All values are rank-2 `f32` tensors.

use super::param::{Gradients, ParamId, ParamStore};
use super::rng::Rng;
use super::tensor::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Result, RtaError};

const LAYER_NORM_EPS: f32 = 1e-5;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Grouped multi-head scaled dot-product attention.
///
/// Rows are split into contiguous groups of `group_len` tokens that attend only
/// within their group; columns are split into `heads` equal slices.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub group_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// Per-row flag: `false` rows are never attended to as keys.
    pub key_mask: Option<Vec<bool>>,
}

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Gather { param: ParamId, rows: Vec<usize> },
    Select { x: Var, rows: Vec<usize> },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst { x: Var, factors: Vec<f32> },
    Scale(Var, f32),
    ScaleRows { x: Var, weights: Vec<f32> },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    CausalUnfold { x: Var, kernel: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Interleave(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    MeanRows(Var),
    CumMean(Var),
    Sum(Var),
    Transpose(Var),
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<f32> },
    GroupSum { x: Var, group: usize, weights: Vec<f32> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Const | Param(_) | Gather { .. } => vec![],
            Select { x, .. }
            | MulConst { x, .. }
            | Scale(x, _)
            | ScaleRows { x, .. }
            | Sigmoid(x)
            | Tanh(x)
            | Relu(x)
            | Gelu(x)
            | LogSigmoid(x)
            | Softmax(x)
            | CausalUnfold { x, .. }
            | SliceCols { x, .. }
            | SliceRows { x, .. }
            | MeanRows(x)
            | CumMean(x)
            | Sum(x)
            | Transpose(x)
            | GroupSum { x, .. } => vec![*x],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | AddRow(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            ConcatCols(xs) | ConcatRows(xs) | Interleave(xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    training: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> RtaError {
    RtaError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(gelu(x), gelu'(x))` with `gelu(x) = ½x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
fn gelu(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

/// `log σ(x)` without overflow.
fn log_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            training: false,
        }
    }

    /// Tape in training mode: dropout is active.
    pub fn training(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            training: true,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        let needs_grad = match &op {
            Op::Const => false,
            Op::Param(id) | Op::Gather { param: id, .. } => !self.params.get(*id).frozen,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.tensor(id).clone();
        self.push(value, Op::Param(id))
    }

    /// Rows of an embedding-table parameter, without copying the table.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = self.params.tensor(id);
        let cols = table.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= table.rows() {
                return Err(RtaError::Domain(format!(
                    "row {r} out of range for `{}` with {} rows",
                    self.params.get(id).name,
                    table.rows()
                )));
            }
            data.extend_from_slice(table.row(r));
        }
        let value = Tensor::matrix(rows.len(), cols, data)?;
        Ok(self.push(value, Op::Gather { param: id, rows: rows.to_vec() }))
    }

    /// Rows of a recorded value (duplicates allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= xv.rows() {
                return Err(RtaError::Domain(format!("select_rows: row {r} of {}", xv.rows())));
            }
            data.extend_from_slice(xv.row(r));
        }
        let value = Tensor::matrix(rows.len(), cols, data)?;
        Ok(self.push(value, Op::Select { x, rows: rows.to_vec() }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err("matmul_nt", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds the `[1, c]` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err("add_row", av, bv));
        }
        let c = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(bv.data()) {
                *x += *y;
            }
        }
        let value = Tensor::matrix(av.rows(), c, data)?;
        Ok(self.push(value, Op::AddRow(a, b)))
    }

    /// Elementwise product with constant factors (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<f32>) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.len() {
            return Err(RtaError::Shape {
                op: "mul_const",
                left: xv.shape().to_vec(),
                right: vec![factors.len()],
            });
        }
        let data = xv.data().iter().zip(&factors).map(|(a, b)| a * b).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulConst { x, factors }))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|a| a * factor).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, factor))
    }

    /// Multiplies row `i` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, x: Var, weights: Vec<f32>) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.rows() {
            return Err(RtaError::Shape {
                op: "scale_rows",
                left: xv.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for (row, w) in data.chunks_mut(c).zip(&weights) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::ScaleRows { x, weights }))
    }

    fn map(&mut self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        Tensor::new(xv.shape().to_vec(), data).expect("same shape")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.map(x, f32::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| gelu(v).0);
        self.push(value, Op::Gelu(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, log_sigmoid);
        self.push(value, Op::LogSigmoid(x))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(x))
    }

    /// Row-wise layer normalization followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let r = xv.rows();
        let mut xhat = vec![0.0f32; r * c];
        let mut inv_std = vec![0.0f32; r];
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
            inv_std[i] = is as f32;
            for j in 0..c {
                let h = ((row[j] as f64 - mean) * is) as f32;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::matrix(r, c, out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Causal im2col: row `t` of the result is `[x_t, x_{t-1}, …, x_{t-k+1}]`
    /// with zero rows before the sequence start.
    pub fn causal_unfold(&mut self, x: Var, kernel: usize) -> Result<Var> {
        if kernel == 0 {
            return Err(RtaError::Config("kernel size must be at least 1".into()));
        }
        let xv = self.value(x);
        let (l, c) = (xv.rows(), xv.cols());
        let mut data = vec![0.0f32; l * kernel * c];
        for t in 0..l {
            for j in 0..kernel.min(t + 1) {
                let dst = &mut data[(t * kernel + j) * c..(t * kernel + j + 1) * c];
                dst.copy_from_slice(xv.row(t - j));
            }
        }
        let value = Tensor::matrix(l, kernel * c, data)?;
        Ok(self.push(value, Op::CausalUnfold { x, kernel }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows();
        let total: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = vec![0.0f32; rows * total];
        let mut offset = 0;
        for &v in xs {
            let xv = self.value(v);
            if xv.rows() != rows {
                return Err(shape_err("concat_cols", self.value(xs[0]), xv));
            }
            let c = xv.cols();
            for i in 0..rows {
                data[i * total + offset..i * total + offset + c].copy_from_slice(xv.row(i));
            }
            offset += c;
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(value, Op::ConcatCols(xs.to_vec())))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.value(xs[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let xv = self.value(v);
            if xv.cols() != cols {
                return Err(shape_err("concat_rows", self.value(xs[0]), xv));
            }
            data.extend_from_slice(xv.data());
            rows += xv.rows();
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(xs.to_vec())))
    }

    /// Interleaves equally shaped `[n, c]` inputs into `[n·m, c]`: row
    /// `i·m + j` is row `i` of input `j`.
    pub fn interleave_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]);
        let (n, c) = (first.rows(), first.cols());
        let m = xs.len();
        let mut data = vec![0.0f32; n * m * c];
        for (j, &v) in xs.iter().enumerate() {
            let xv = self.value(v);
            if xv.shape() != self.value(xs[0]).shape() {
                return Err(shape_err("interleave_rows", self.value(xs[0]), xv));
            }
            for i in 0..n {
                data[(i * m + j) * c..(i * m + j + 1) * c].copy_from_slice(xv.row(i));
            }
        }
        let value = Tensor::matrix(n * m, c, data)?;
        Ok(self.push(value, Op::Interleave(xs.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.cols() {
            return Err(RtaError::Domain(format!("slice_cols {start}..{end} of {}", xv.cols())));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(xv.rows() * w);
        for i in 0..xv.rows() {
            data.extend_from_slice(&xv.row(i)[start..end]);
        }
        let value = Tensor::matrix(xv.rows(), w, data)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.rows() {
            return Err(RtaError::Domain(format!("slice_rows {start}..{end} of {}", xv.rows())));
        }
        let c = xv.cols();
        let value = Tensor::matrix(end - start, c, xv.data()[start * c..end * c].to_vec())?;
        Ok(self.push(value, Op::SliceRows { x, start }))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, i + 1)
    }

    /// Column-wise mean over rows, `[r, c] → [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut acc = vec![0.0f64; c];
        for i in 0..r {
            for (a, &v) in acc.iter_mut().zip(xv.row(i)) {
                *a += v as f64;
            }
        }
        let data = acc.iter().map(|&a| (a / r as f64) as f32).collect();
        self.push(Tensor::row_vector(data), Op::MeanRows(x))
    }

    /// Running mean: row `i` is the mean of rows `0..=i`.
    pub fn cum_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut acc = vec![0.0f64; c];
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for (a, &v) in acc.iter_mut().zip(xv.row(i)) {
                *a += v as f64;
            }
            data.extend(acc.iter().map(|&a| (a / (i + 1) as f64) as f32));
        }
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::CumMean(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv.data()[i * c + j];
            }
        }
        self.push(Tensor::matrix(c, r, data).expect("transpose"), Op::Transpose(x))
    }

    /// Inverted dropout: identity outside training mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f32, rng: &mut Rng) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(RtaError::Config(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask = (0..n).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect();
        self.mul_const(x, mask)
    }

    /// `out[g] = Σ_j weights[g·group + j] · x[g·group + j]` for each group.
    pub fn group_sum(&mut self, x: Var, group: usize, weights: Vec<f32>) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || xv.rows() % group != 0 || weights.len() != xv.rows() {
            return Err(RtaError::Shape {
                op: "group_sum",
                left: xv.shape().to_vec(),
                right: vec![group, weights.len()],
            });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let g = r / group;
        let mut data = vec![0.0f32; g * c];
        for i in 0..r {
            let w = weights[i];
            if w == 0.0 {
                continue;
            }
            let dst = &mut data[(i / group) * c..(i / group + 1) * c];
            for (d, &v) in dst.iter_mut().zip(xv.row(i)) {
                *d += w * v;
            }
        }
        let value = Tensor::matrix(g, c, data)?;
        Ok(self.push(value, Op::GroupSum { x, group, weights }))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(shape_err("attention", qv, kv));
        }
        let (t, d) = (qv.rows(), qv.cols());
        let g = spec.group_len;
        if g == 0 || t % g != 0 {
            return Err(RtaError::Domain(format!("attention: {t} rows not divisible into groups of {g}")));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(RtaError::Config(format!("{} heads do not divide width {d}", spec.heads)));
        }
        if let Some(mask) = &spec.key_mask {
            if mask.len() != t {
                return Err(RtaError::Domain("attention key mask length".into()));
            }
        }
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0f32; spec.heads * t * g];
        let mut out = vec![0.0f32; t * d];
        let mut scores = vec![0.0f32; g];
        for h in 0..spec.heads {
            let cs = h * dh;
            for i in 0..t {
                let base = (i / g) * g;
                let qi = &qv.row(i)[cs..cs + dh];
                let mut any = false;
                for jj in 0..g {
                    let j = base + jj;
                    let allowed = (!spec.causal || j <= i) && spec.key_mask.as_ref().is_none_or(|m| m[j]);
                    scores[jj] = if allowed {
                        any = true;
                        dot(qi, &kv.row(j)[cs..cs + dh]) * scale
                    } else {
                        f32::NEG_INFINITY
                    };
                }
                if !any {
                    continue;
                }
                softmax_in_place(&mut scores);
                let p = &mut probs[(h * t + i) * g..(h * t + i + 1) * g];
                p.copy_from_slice(&scores);
                let orow = &mut out[i * d + cs..i * d + cs + dh];
                for (jj, &pj) in p.iter().enumerate() {
                    if pj == 0.0 {
                        continue;
                    }
                    let vj = &vv.row(base + jj)[cs..cs + dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
        }
        let value = Tensor::matrix(t, d, out)?;
        Ok(self.push(value, Op::Attention { q, k, v, spec, probs }))
    }

    /// Reverse pass from the scalar `loss`, adding parameter gradients into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        self.backward_seeded(loss, Tensor::scalar(1.0), grads)
    }

    /// Reverse pass from an arbitrary output with upstream gradient `seed`.
    pub fn backward_seeded(&self, out: Var, seed: Tensor, grads: &mut Gradients) -> Result<()> {
        if seed.shape() != self.value(out).shape() {
            return Err(shape_err("backward", self.value(out), &seed));
        }
        let mut adj: Vec<Option<Vec<f32>>> = (0..=out.0).map(|_| None).collect();
        adj[out.0] = Some(seed.into_data());
        for idx in (0..=out.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut adj, grads);
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f32], adj: &mut [Option<Vec<f32>>], grads: &mut Gradients) {
        let mut acc = |v: Var, delta: Vec<f32>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(a) => a.iter_mut().zip(&delta).for_each(|(x, y)| *x += *y),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Const => {}
            Op::Param(id) => grads.add_dense(*id, g),
            Op::Gather { param, rows } => {
                let c = out.cols();
                for (i, &r) in rows.iter().enumerate() {
                    grads.add_row(*param, r, &g[i * c..(i + 1) * c]);
                }
            }
            Op::Select { x, rows } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for (a, b) in d[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *a += *b;
                    }
                }
                acc(*x, d);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut da = vec![0.0; m * k];
                gemm_nt_acc(g, bv.data(), &mut da, m, n, k);
                acc(*a, da);
                let mut db = vec![0.0; k * n];
                gemm_tn_acc(av.data(), g, &mut db, m, k, n);
                acc(*b, db);
            }
            Op::MatMulNt(a, b) => {
                // out[m,n] = a[m,k] b[n,k]ᵀ
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                let mut da = vec![0.0; m * k];
                gemm_acc(g, bv.data(), &mut da, m, n, k);
                acc(*a, da);
                let mut db = vec![0.0; n * k];
                gemm_tn_acc(g, av.data(), &mut db, m, n, k);
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, g.iter().zip(bv.data()).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(av.data()).map(|(x, y)| x * y).collect());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.to_vec());
                let c = out.cols();
                let mut db = vec![0.0f64; c];
                for row in g.chunks(c) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v as f64;
                    }
                }
                acc(*b, db.into_iter().map(|v| v as f32).collect());
            }
            Op::MulConst { x, factors } => acc(*x, g.iter().zip(factors).map(|(a, b)| a * b).collect()),
            Op::Scale(x, f) => acc(*x, g.iter().map(|v| v * f).collect()),
            Op::ScaleRows { x, weights } => {
                let c = out.cols();
                let mut d = g.to_vec();
                for (row, w) in d.chunks_mut(c).zip(weights) {
                    row.iter_mut().for_each(|v| *v *= w);
                }
                acc(*x, d);
            }
            Op::Sigmoid(x) => acc(*x, g.iter().zip(out.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect()),
            Op::Tanh(x) => acc(*x, g.iter().zip(out.data()).map(|(gv, t)| gv * (1.0 - t * t)).collect()),
            Op::Relu(x) => acc(*x, g.iter().zip(val(*x).data()).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }).collect()),
            Op::Gelu(x) => acc(*x, g.iter().zip(val(*x).data()).map(|(gv, &v)| gv * gelu(v).1).collect()),
            Op::LogSigmoid(x) => {
                // d/dx log σ(x) = 1 − σ(x) = σ(−x)
                acc(*x, g.iter().zip(val(*x).data()).map(|(gv, &v)| gv * sigmoid(-v)).collect())
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for ((drow, grow), prow) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let s: f64 = grow.iter().zip(prow).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                    for j in 0..c {
                        drow[j] = prow[j] * (grow[j] - s as f32);
                    }
                }
                acc(*x, d);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = out.cols();
                let r = out.rows();
                let gv = val(*gain).data();
                let mut dgain = vec![0.0f64; c];
                let mut dbias = vec![0.0f64; c];
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    let grow = &g[i * c..(i + 1) * c];
                    let hrow = &xhat[i * c..(i + 1) * c];
                    let mut mean_dh = 0.0f64;
                    let mut mean_dh_h = 0.0f64;
                    for j in 0..c {
                        dgain[j] += (grow[j] * hrow[j]) as f64;
                        dbias[j] += grow[j] as f64;
                        let dh = (grow[j] * gv[j]) as f64;
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[j] as f64;
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let dh = (grow[j] * gv[j]) as f64;
                        dx[i * c + j] = (inv_std[i] as f64 * (dh - mean_dh - hrow[j] as f64 * mean_dh_h)) as f32;
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain.into_iter().map(|v| v as f32).collect());
                acc(*bias, dbias.into_iter().map(|v| v as f32).collect());
            }
            Op::CausalUnfold { x, kernel } => {
                let xv = val(*x);
                let (l, c) = (xv.rows(), xv.cols());
                let mut d = vec![0.0; l * c];
                for t in 0..l {
                    for j in 0..(*kernel).min(t + 1) {
                        let src = &g[(t * kernel + j) * c..(t * kernel + j + 1) * c];
                        for (a, b) in d[(t - j) * c..(t - j + 1) * c].iter_mut().zip(src) {
                            *a += *b;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::ConcatCols(xs) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &v in xs {
                    let c = val(v).cols();
                    let mut d = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        d.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                    }
                    acc(v, d);
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let n = val(v).len();
                    acc(v, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Interleave(xs) => {
                let m = xs.len();
                let c = out.cols();
                let n = out.rows() / m;
                for (j, &v) in xs.iter().enumerate() {
                    let mut d = Vec::with_capacity(n * c);
                    for i in 0..n {
                        d.extend_from_slice(&g[(i * m + j) * c..(i * m + j + 1) * c]);
                    }
                    acc(v, d);
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let w = out.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                acc(*x, d);
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*x, d);
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let r = xv.rows();
                let inv = 1.0 / r as f32;
                let row: Vec<f32> = g.iter().map(|v| v * inv).collect();
                acc(*x, row.iter().cycle().take(xv.len()).copied().collect());
            }
            Op::CumMean(x) => {
                // out_i = (1/(i+1)) Σ_{j≤i} x_j  ⇒  dx_j = Σ_{i≥j} g_i/(i+1)
                let (r, c) = (out.rows(), out.cols());
                let mut d = vec![0.0f32; r * c];
                let mut suffix = vec![0.0f64; c];
                for i in (0..r).rev() {
                    for (s, &gv) in suffix.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *s += gv as f64 / (i + 1) as f64;
                    }
                    for (dv, s) in d[i * c..(i + 1) * c].iter_mut().zip(&suffix) {
                        *dv = *s as f32;
                    }
                }
                acc(*x, d);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Transpose(x) => {
                let (r, c) = (out.rows(), out.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g[i * c + j];
                    }
                }
                acc(*x, d);
            }
            Op::GroupSum { x, group, weights } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (i, &w) in weights.iter().enumerate() {
                    let src = &g[(i / group) * c..(i / group + 1) * c];
                    for (a, &b) in d[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *a = w * b;
                    }
                }
                acc(*x, d);
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (t, d) = (qv.rows(), qv.cols());
                let gl = spec.group_len;
                let dh = d / spec.heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let mut dq = vec![0.0f32; t * d];
                let mut dk = vec![0.0f32; t * d];
                let mut dv = vec![0.0f32; t * d];
                let mut dp = vec![0.0f32; gl];
                for h in 0..spec.heads {
                    let cs = h * dh;
                    for i in 0..t {
                        let base = (i / gl) * gl;
                        let p = &probs[(h * t + i) * gl..(h * t + i + 1) * gl];
                        let gi = &g[i * d + cs..i * d + cs + dh];
                        let mut weighted = 0.0f64;
                        for jj in 0..gl {
                            if p[jj] == 0.0 {
                                dp[jj] = 0.0;
                                continue;
                            }
                            let j = base + jj;
                            dp[jj] = dot(gi, &vv.row(j)[cs..cs + dh]);
                            weighted += (p[jj] * dp[jj]) as f64;
                            for (a, &b) in dv[j * d + cs..j * d + cs + dh].iter_mut().zip(gi) {
                                *a += p[jj] * b;
                            }
                        }
                        for jj in 0..gl {
                            if p[jj] == 0.0 {
                                continue;
                            }
                            let j = base + jj;
                            let ds = p[jj] * (dp[jj] - weighted as f32) * scale;
                            let kj = &kv.row(j)[cs..cs + dh];
                            let qi = &qv.row(i)[cs..cs + dh];
                            for c in 0..dh {
                                dq[i * d + cs + c] += ds * kj[c];
                                dk[j * d + cs + c] += ds * qi[c];
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v as f64;
    }
    let inv = (1.0 / total) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut ps = ParamStore::new();
        let id = ps.add(name, t, false).unwrap();
        (ps, id)
    }

    #[test]
    fn bilinear_form_and_gradient() {
        let (ps, w) = store_with("w", Tensor::row_vector(vec![1.0, 2.0]));
        let mut tape = Tape::new(&ps);
        let wv = tape.param(w);
        let x = tape.constant(Tensor::row_vector(vec![1.0, 2.0]));
        let y = tape.matmul_nt(wv, x).unwrap();
        assert_eq!(tape.value(y).item(), 5.0);
        let mut grads = Gradients::new();
        tape.backward(y, &mut grads).unwrap();
        assert_eq!(grads.dense(&ps, w), vec![1.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let (ps, w) = store_with("w", Tensor::scalar(0.0));
        let mut tape = Tape::new(&ps);
        let x = tape.param(w);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
        let mut grads = Gradients::new();
        tape.backward(y, &mut grads).unwrap();
        assert_eq!(grads.dense(&ps, w), vec![0.25]);
    }

    #[test]
    fn gelu_values_and_slope() {
        let (ps, w) = store_with("w", Tensor::from_rows(&[vec![0.0, 1.0, -3.0]]).unwrap());
        let mut tape = Tape::new(&ps);
        let x = tape.param(w);
        let y = tape.gelu(x);
        let v = tape.value(y).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.841_192).abs() < 1e-5);
        assert!(v[2].abs() < 5e-3);
        let s = tape.sum(y);
        let mut grads = Gradients::new();
        tape.backward(s, &mut grads).unwrap();
        let g = grads.dense(&ps, w);
        assert!((g[0] - 0.5).abs() < 1e-6);
        let f = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        let numeric = (f(1.0 + 1e-6) - f(1.0 - 1e-6)) / 2e-6;
        assert!((g[1] as f64 - numeric).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(RtaError::Shape { op, left, right }) => {
                assert_eq!(op, "matmul");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-100.0) + 100.0).abs() < 1e-4);
        assert!(log_sigmoid(100.0).abs() < 1e-30);
        assert!((log_sigmoid(0.0) + std::f32::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn gather_gradient_is_row_sparse() {
        let (ps, e) = store_with("emb", Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mut tape = Tape::new(&ps);
        let rows = tape.gather(e, &[2, 0, 2]).unwrap();
        let s = tape.sum(rows);
        assert_eq!(tape.value(s).item(), 5.0 + 6.0 + 1.0 + 2.0 + 5.0 + 6.0);
        let mut grads = Gradients::new();
        tape.backward(s, &mut grads).unwrap();
        let buf = grads.get(e).unwrap();
        assert!(buf.dense.is_none());
        assert_eq!(buf.rows[&2], vec![2.0, 2.0]);
        assert_eq!(buf.rows[&0], vec![1.0, 1.0]);
        assert!(!buf.rows.contains_key(&1));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let (mut ps, w) = store_with("w", Tensor::scalar(3.0));
        ps.set_frozen(w, true);
        let mut tape = Tape::new(&ps);
        let x = tape.param(w);
        let y = tape.tanh(x);
        let mut grads = Gradients::new();
        tape.backward(y, &mut grads).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_eval_mode_is_identity() {
        let ps = ParamStore::new();
        let mut rng = Rng::seed_from(1);
        let mut tape = Tape::training(&ps);
        let x = tape.constant(Tensor::row_vector(vec![1.0; 8]));
        assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
        let mut eval = Tape::new(&ps);
        let x = eval.constant(Tensor::row_vector(vec![1.0; 8]));
        assert_eq!(eval.dropout(x, 0.5, &mut rng).unwrap(), x);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let ps = ParamStore::new();
        let mut rng = Rng::seed_from(2);
        let mut tape = Tape::training(&ps);
        let n = 200_000;
        let x = tape.constant(Tensor::row_vector(vec![2.0; n]));
        let y = tape.dropout(x, 0.3, &mut rng).unwrap();
        let mean: f64 = tape.value(y).data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn uniform_attention_averages_values() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let zeros = tape.constant(Tensor::zeros(&[3, 2]));
        let v = tape.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 2.0, 0.0, 3.0, 3.0]).unwrap());
        let spec = AttentionSpec {
            group_len: 3,
            heads: 1,
            causal: true,
            key_mask: None,
        };
        let out = tape.attention(zeros, zeros, v, spec).unwrap();
        let o = tape.value(out);
        assert_eq!(o.row(0), &[1.0, 0.0]);
        assert_eq!(o.row(1), &[1.5, 0.0]);
        assert!((o.row(2)[0] - 2.0).abs() < 1e-6 && (o.row(2)[1] - 1.0).abs() < 1e-6);
    }
}
