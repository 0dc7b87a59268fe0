//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value plus whatever
//! the backward rule needs. Nodes are appended in evaluation order, so the
//! tape is topologically sorted by construction and `backward` is a single
//! reverse sweep.

use std::sync::Arc;

use super::kernels::{self, gelu, gelu_grad, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::reduce::{reduce_with_grad, Reduce};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined primitive with a hand-written backward rule.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Returns one gradient buffer per input, each the length of that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ShiftRows(Var, isize),
    GroupMix { x: Var, mat: Vec<f64>, n: usize },
    SegmentMean { x: Var, offsets: Vec<i64>, counts: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<f64> },
    SegmentReduce { x: Var, seg_of_col: Vec<usize>, weights: Vec<f64> },
    Pick(Var, Vec<usize>),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Bce { logits: Var, labels: Vec<f64> },
    Custom { op: Arc<dyn CustomOp>, inputs: Vec<Var> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    checked: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.last_dim())
}

impl Tape {
    /// A tape in checked mode: every produced value is tested for finiteness.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), checked: true, backward_done: false }
    }

    pub fn unchecked() -> Self {
        Tape { checked: false, ..Self::new() }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last backward pass w.r.t. `v`, if it received any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of the leaf value with its gradient slot filled.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.value(v).clone();
        t.requires_grad = self.requires_grad(v);
        t.grad = self.grad(v).map(|g| g.to_vec());
        t
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Registers a tensor as a leaf; it receives gradients iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let ng = t.requires_grad;
        let mut t = t;
        t.grad = None;
        self.push(t, Op::Leaf, ng, "leaf")
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_grad())
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("{s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), ng, "transpose")
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_parts(shape, out), op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(&[a]);
        self.push(Tensor::from_parts(shape, out), op, ng, name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, "scale", |x| x * c, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, "log", f64::ln, Op::Log(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, "gelu", gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, "relu", |x| x.max(0.0), Op::Relu(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(a, "clamp", |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// `x[..., d] + b[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(b).len() != d {
            return Err(Error::dim("add_row", format!("{:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let bd = self.value(b).data();
        let out: Vec<f64> = self.value(x).data().iter().enumerate().map(|(i, &v)| v + bd[i % d]).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, b]);
        self.push(Tensor::from_parts(shape, out), Op::AddRow(x, b), ng, "add_row")
    }

    fn scalar_of(&self, s: Var, op: &'static str) -> Result<f64> {
        if self.value(s).len() != 1 {
            return Err(Error::dim(op, format!("expected scalar, got {:?}", self.shape(s))));
        }
        Ok(self.value(s).item())
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s, "mul_scalar")?;
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(&[x, s]);
        self.push(Tensor::from_parts(shape, out), Op::MulScalar(x, s), ng, "mul_scalar")
    }

    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s, "div_scalar")?;
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v / c).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(&[x, s]);
        self.push(Tensor::from_parts(shape, out), Op::DivScalar(x, s), ng, "div_scalar")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng, "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())
            .map_err(|_| Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        let ng = self.ng(&[a]);
        self.push(t, Op::Reshape(a), ng, "reshape")
    }

    // ---------------------------------------------------------------- normalisation

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            kernels::softmax_inplace(row);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), ng, "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(a), ng, "log_softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim("layer_norm", format!("width {d}")));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xs = self.value(x).data();
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
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, gamma, beta]);
        self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng, "layer_norm")
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::L2Normalize { x, norms }, ng, "l2_normalize")
    }

    // ---------------------------------------------------------------- attention

    /// Multi-head scaled dot-product attention over `[L, D]` matrices; head `h`
    /// uses columns `h*D/H .. (h+1)*D/H`. `mask[i*Lk + j] == true` allows query
    /// `i` to see key `j`; rows with no allowed key produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
        let (lq, d) = rows_cols(self.value(q));
        let (lk, dk) = rows_cols(self.value(k));
        let (lv, dv) = rows_cols(self.value(v));
        if self.shape(q).len() != 2 || dk != d || dv != d || lv != lk {
            return Err(Error::dim(
                "attention",
                format!("q {:?} k {:?} v {:?}", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention", format!("width {d} not divisible by {heads} heads")));
        }
        if let Some(m) = mask {
            if m.len() != lq * lk {
                return Err(Error::dim("attention", format!("mask len {} != {lq}x{lk}", m.len())));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * lq * lk];
        let mut out = vec![0.0; lq * d];
        let mut scores = vec![0.0; lk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qi = &qd[i * d + off..i * d + off + dh];
                let mut any = false;
                for j in 0..lk {
                    if mask.is_some_and(|m| !m[i * lk + j]) {
                        scores[j] = f64::NEG_INFINITY;
                        continue;
                    }
                    any = true;
                    let kj = &kd[j * d + off..j * d + off + dh];
                    scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                if !any {
                    continue;
                }
                kernels::softmax_inplace(&mut scores);
                let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                p.copy_from_slice(&scores);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..lk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, vv) in orow.iter_mut().zip(vj) {
                        *o += p[j] * vv;
                    }
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(Tensor::from_parts(vec![lq, d], out), Op::Attention { q, k, v, heads, probs }, ng, "attention")
    }

    // ---------------------------------------------------------------- structural

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let d = self.value(first).last_dim();
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).last_dim() != d {
                return Err(Error::dim("concat_rows", "width mismatch"));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / d;
        let ng = self.ng(parts);
        self.push(Tensor::from_parts(vec![rows, d], out), Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat_cols", "row count mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).last_dim()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = self.ng(parts);
        self.push(Tensor::from_parts(vec![rows, total], out), Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = rows_cols(t);
        if len == 0 || start + len > rows {
            return Err(Error::dim("slice_rows", format!("{start}+{len} of {rows}")));
        }
        let out = t.data()[start * d..(start + len) * d].to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(vec![len, d], out), Op::SliceRows(x, start), ng, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = rows_cols(t);
        if len == 0 || start + len > d {
            return Err(Error::dim("slice_cols", format!("{start}+{len} of {d}")));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(vec![rows, len], out), Op::SliceCols(x, start), ng, "slice_cols")
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = rows_cols(t);
        if ids.is_empty() {
            return Err(Error::dim("gather_rows", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows", format!("id {bad} out of range {rows}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(&[table]);
        self.push(Tensor::from_parts(vec![ids.len(), d], out), Op::GatherRows(table, ids.to_vec()), ng, "gather_rows")
    }

    /// `out[r] = x[r + shift]`, zero where the source row is out of range.
    pub fn shift_rows(&mut self, x: Var, shift: isize) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = rows_cols(t);
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let src = r as isize + shift;
            if src >= 0 && (src as usize) < rows {
                let s = src as usize;
                out[r * d..(r + 1) * d].copy_from_slice(t.row(s));
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::ShiftRows(x, shift), ng, "shift_rows")
    }

    /// Treats `x` as consecutive groups of `n` rows and left-multiplies each
    /// group by the constant `[n, n]` matrix `mat`.
    pub fn group_mix(&mut self, x: Var, mat: &Tensor, n: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = rows_cols(t);
        if mat.shape() != [n, n] || rows % n != 0 {
            return Err(Error::dim("group_mix", format!("{rows} rows with {:?} mixer", mat.shape())));
        }
        let m = mat.data();
        let mut out = vec![0.0; rows * d];
        for g in 0..rows / n {
            let base = g * n * d;
            matmul_acc(m, &t.data()[base..base + n * d], &mut out[base..base + n * d], n, n, d);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::GroupMix { x, mat: m.to_vec(), n }, ng, "group_mix")
    }

    /// Mean of the rows sharing each non-negative offset; negative offsets are skipped.
    pub fn segment_mean(&mut self, x: Var, offsets: &[i64], k: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = rows_cols(t);
        if offsets.len() != rows {
            return Err(Error::dim("segment_mean", format!("{} offsets for {rows} rows", offsets.len())));
        }
        let mut counts = vec![0usize; k];
        let mut out = vec![0.0; k * d];
        for (r, &o) in offsets.iter().enumerate() {
            if o < 0 {
                continue;
            }
            let j = o as usize;
            if j >= k {
                return Err(Error::dim("segment_mean", format!("offset {j} >= {k}")));
            }
            counts[j] += 1;
            for (acc, v) in out[j * d..(j + 1) * d].iter_mut().zip(t.row(r)) {
                *acc += v;
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::dim("segment_mean", format!("segment {empty} is empty")));
        }
        for j in 0..k {
            let c = counts[j] as f64;
            out[j * d..(j + 1) * d].iter_mut().for_each(|v| *v /= c);
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::from_parts(vec![k, d], out),
            Op::SegmentMean { x, offsets: offsets.to_vec(), counts },
            ng,
            "segment_mean",
        )
    }

    /// Reduces each row over consecutive column segments of the given widths:
    /// `[R, Σ widths] -> [R, widths.len()]`.
    pub fn segment_reduce(&mut self, x: Var, widths: &[usize], kind: Reduce) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = rows_cols(t);
        if widths.is_empty() || widths.contains(&0) || widths.iter().sum::<usize>() != d {
            return Err(Error::dim("segment_reduce", format!("widths {widths:?} vs {d} columns")));
        }
        let nseg = widths.len();
        let mut seg_of_col = Vec::with_capacity(d);
        for (s, &w) in widths.iter().enumerate() {
            seg_of_col.extend(std::iter::repeat_n(s, w));
        }
        let mut weights = vec![0.0; rows * d];
        let mut out = vec![0.0; rows * nseg];
        for r in 0..rows {
            let row = t.row(r);
            let mut start = 0;
            for (s, &w) in widths.iter().enumerate() {
                out[r * nseg + s] = reduce_with_grad(
                    kind,
                    &row[start..start + w],
                    &mut weights[r * d + start..r * d + start + w],
                );
                start += w;
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::from_parts(vec![rows, nseg], out),
            Op::SegmentReduce { x, seg_of_col, weights },
            ng,
            "segment_reduce",
        )
    }

    /// Flat element gather into a vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= t.len()) {
            return Err(Error::dim("pick", "index out of range"));
        }
        let out: Vec<f64> = idx.iter().map(|&i| t.data()[i]).collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(vec![idx.len()], out), Op::Pick(x, idx.to_vec()), ng, "pick")
    }

    // ---------------------------------------------------------------- losses

    /// Mean token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, v) = rows_cols(t);
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", format!("{} targets for {rows} rows", targets.len())));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy: every target position is masked"));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, tgt) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            let Some(c) = *tgt else { continue };
            if c >= v {
                return Err(Error::dim("cross_entropy", format!("target {c} >= vocab {v}")));
            }
            let lse = kernels::log_sum_exp(row);
            loss += lse - row[c];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let loss = loss / count as f64;
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            ng,
            "cross_entropy",
        )
    }

    /// Mean binary cross-entropy with logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != labels.len() || labels.is_empty() {
            return Err(Error::dim("bce_with_logits", format!("{} logits, {} labels", t.len(), labels.len())));
        }
        let loss = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / labels.len() as f64;
        let ng = self.ng(&[logits]);
        self.push(Tensor::scalar(loss), Op::Bce { logits, labels: labels.to_vec() }, ng, "bce_with_logits")
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&vals)?;
        let ng = self.ng(inputs);
        let name = op.name();
        self.push(Tensor::from_parts(out.shape().to_vec(), out.into_data()), Op::Custom { op, inputs: inputs.to_vec() }, ng, name)
    }

    // ---------------------------------------------------------------- backward

    /// Populates gradients for every leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward already ran on this tape; reset first".into()));
        }
        let node = self.nodes.get(loss.0).ok_or_else(|| Error::Backward("loss is not on this tape".into()))?;
        if node.value.len() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", node.value.shape())));
        }
        if !node.needs_grad {
            return Err(Error::Backward("loss does not depend on any trainable input".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&self.nodes, i, &g, &mut grads);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }
}

/// Adds into the gradient buffer of `v` via `f`, allocating it on first use.
fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    for (b, x) in buf.iter_mut().zip(g) {
        *b += x;
    }
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            let (ad, bd) = (val(*a).data(), val(*b).data());
            acc(nodes, grads, *a, |buf| matmul_a_bt_acc(g, bd, buf, m, k, n));
            acc(nodes, grads, *b, |buf| matmul_at_b_acc(ad, g, buf, m, k, n));
        }
        Op::Transpose(a) => {
            let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
            acc(nodes, grads, *a, |buf| {
                for i in 0..m {
                    for j in 0..n {
                        buf[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |buf| add_into(buf, g));
            acc(nodes, grads, *b, |buf| add_into(buf, g));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |buf| add_into(buf, g));
            acc(nodes, grads, *b, |buf| buf.iter_mut().zip(g).for_each(|(b, x)| *b -= x));
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            acc(nodes, grads, *a, |buf| {
                for ((o, x), y) in buf.iter_mut().zip(g).zip(bd) {
                    *o += x * y;
                }
            });
            acc(nodes, grads, *b, |buf| {
                for ((o, x), y) in buf.iter_mut().zip(g).zip(ad) {
                    *o += x * y;
                }
            });
        }
        Op::Scale(a, c) => acc(nodes, grads, *a, |buf| buf.iter_mut().zip(g).for_each(|(b, x)| *b += c * x)),
        Op::AddRow(x, b) => {
            acc(nodes, grads, *x, |buf| add_into(buf, g));
            let d = val(*b).len();
            acc(nodes, grads, *b, |buf| {
                for (i, x) in g.iter().enumerate() {
                    buf[i % d] += x;
                }
            });
        }
        Op::MulScalar(x, s) => {
            let c = val(*s).item();
            let xd = val(*x).data();
            acc(nodes, grads, *x, |buf| buf.iter_mut().zip(g).for_each(|(b, gv)| *b += c * gv));
            acc(nodes, grads, *s, |buf| buf[0] += g.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>());
        }
        Op::DivScalar(x, s) => {
            let c = val(*s).item();
            let xd = val(*x).data();
            acc(nodes, grads, *x, |buf| buf.iter_mut().zip(g).for_each(|(b, gv)| *b += gv / c));
            acc(nodes, grads, *s, |buf| {
                buf[0] -= g.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>() / (c * c)
            });
        }
        Op::Exp(a) => acc(nodes, grads, *a, |buf| {
            for ((b, gv), y) in buf.iter_mut().zip(g).zip(out.data()) {
                *b += gv * y;
            }
        }),
        Op::Log(a) => {
            let xd = val(*a).data();
            acc(nodes, grads, *a, |buf| {
                for ((b, gv), x) in buf.iter_mut().zip(g).zip(xd) {
                    *b += gv / x;
                }
            })
        }
        Op::Gelu(a) => {
            let xd = val(*a).data();
            acc(nodes, grads, *a, |buf| {
                for ((b, gv), x) in buf.iter_mut().zip(g).zip(xd) {
                    *b += gv * gelu_grad(*x);
                }
            })
        }
        Op::Relu(a) => {
            let xd = val(*a).data();
            acc(nodes, grads, *a, |buf| {
                for ((b, gv), x) in buf.iter_mut().zip(g).zip(xd) {
                    if *x > 0.0 {
                        *b += gv;
                    }
                }
            })
        }
        Op::Clamp(a, lo, hi) => {
            let xd = val(*a).data();
            acc(nodes, grads, *a, |buf| {
                for ((b, gv), x) in buf.iter_mut().zip(g).zip(xd) {
                    if *x >= *lo && *x <= *hi {
                        *b += gv;
                    }
                }
            })
        }
        Op::Sum(a) => acc(nodes, grads, *a, |buf| buf.iter_mut().for_each(|b| *b += g[0])),
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            acc(nodes, grads, *a, |buf| buf.iter_mut().for_each(|b| *b += g[0] / n))
        }
        Op::Reshape(a) => acc(nodes, grads, *a, |buf| add_into(buf, g)),
        Op::Softmax(a) => {
            let d = out.last_dim();
            acc(nodes, grads, *a, |buf| {
                for ((brow, grow), yrow) in buf.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        brow[c] += yrow[c] * (grow[c] - dot);
                    }
                }
            })
        }
        Op::LogSoftmax(a) => {
            let d = out.last_dim();
            acc(nodes, grads, *a, |buf| {
                for ((brow, grow), yrow) in buf.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                    let gs: f64 = grow.iter().sum();
                    for c in 0..d {
                        brow[c] += grow[c] - yrow[c].exp() * gs;
                    }
                }
            })
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = val(*gamma).len();
            let gam = val(*gamma).data();
            acc(nodes, grads, *gamma, |buf| {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for c in 0..d {
                        buf[c] += gr[c] * hr[c];
                    }
                }
            });
            acc(nodes, grads, *beta, |buf| {
                for gr in g.chunks(d) {
                    add_into(buf, gr);
                }
            });
            acc(nodes, grads, *x, |buf| {
                for (r, ((br, gr), hr)) in buf.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                    let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                    let m1 = dh.iter().sum::<f64>() / d as f64;
                    let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        br[c] += rstd[r] * (dh[c] - m1 - hr[c] * m2);
                    }
                }
            });
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (lq, d) = (val(*q).rows(), val(*q).last_dim());
            let lk = val(*k).rows();
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
            let mut dq = vec![0.0; lq * d];
            let mut dk = vec![0.0; lk * d];
            let mut dv = vec![0.0; lk * d];
            let mut dp = vec![0.0; lk];
            for h in 0..*heads {
                let off = h * dh;
                for i in 0..lq {
                    let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                    let gi = &g[i * d + off..i * d + off + dh];
                    let mut dot = 0.0;
                    for j in 0..lk {
                        let vj = &vd[j * d + off..j * d + off + dh];
                        dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dot += p[j] * dp[j];
                        if p[j] != 0.0 {
                            for (o, gv) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                                *o += p[j] * gv;
                            }
                        }
                    }
                    for j in 0..lk {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[i * d + off + c] += ds * kd[j * d + off + c];
                            dk[j * d + off + c] += ds * qd[i * d + off + c];
                        }
                    }
                }
            }
            acc(nodes, grads, *q, |buf| add_into(buf, &dq));
            acc(nodes, grads, *k, |buf| add_into(buf, &dk));
            acc(nodes, grads, *v, |buf| add_into(buf, &dv));
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for p in parts {
                let n = val(*p).len();
                acc(nodes, grads, *p, |buf| add_into(buf, &g[start..start + n]));
                start += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.last_dim();
            let mut col = 0;
            for p in parts {
                let w = val(*p).last_dim();
                acc(nodes, grads, *p, |buf| {
                    for (r, br) in buf.chunks_mut(w).enumerate() {
                        add_into(br, &g[r * total + col..r * total + col + w]);
                    }
                });
                col += w;
            }
        }
        Op::SliceRows(x, start) => {
            let d = out.last_dim();
            acc(nodes, grads, *x, |buf| add_into(&mut buf[start * d..start * d + g.len()], g));
        }
        Op::SliceCols(x, start) => {
            let w = out.last_dim();
            let d = val(*x).last_dim();
            acc(nodes, grads, *x, |buf| {
                for (r, gr) in g.chunks(w).enumerate() {
                    add_into(&mut buf[r * d + start..r * d + start + w], gr);
                }
            });
        }
        Op::GatherRows(table, ids) => {
            let d = out.last_dim();
            acc(nodes, grads, *table, |buf| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            });
        }
        Op::ShiftRows(x, shift) => {
            let d = out.last_dim();
            let rows = out.rows();
            acc(nodes, grads, *x, |buf| {
                for r in 0..rows {
                    let src = r as isize + shift;
                    if src >= 0 && (src as usize) < rows {
                        let s = src as usize;
                        add_into(&mut buf[s * d..(s + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            });
        }
        Op::GroupMix { x, mat, n } => {
            let d = out.last_dim();
            let rows = out.rows();
            acc(nodes, grads, *x, |buf| {
                for grp in 0..rows / n {
                    let base = grp * n * d;
                    matmul_at_b_acc(mat, &g[base..base + n * d], &mut buf[base..base + n * d], *n, *n, d);
                }
            });
        }
        Op::SegmentMean { x, offsets, counts } => {
            let d = out.last_dim();
            acc(nodes, grads, *x, |buf| {
                for (r, &o) in offsets.iter().enumerate() {
                    if o < 0 {
                        continue;
                    }
                    let j = o as usize;
                    let c = counts[j] as f64;
                    for col in 0..d {
                        buf[r * d + col] += g[j * d + col] / c;
                    }
                }
            });
        }
        Op::L2Normalize { x, norms } => {
            let d = out.last_dim();
            acc(nodes, grads, *x, |buf| {
                for (r, ((br, gr), yr)) in buf.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        br[c] += (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
            });
        }
        Op::SegmentReduce { x, seg_of_col, weights } => {
            let d = seg_of_col.len();
            let nseg = out.last_dim();
            acc(nodes, grads, *x, |buf| {
                for (idx, b) in buf.iter_mut().enumerate() {
                    let (r, c) = (idx / d, idx % d);
                    *b += weights[idx] * g[r * nseg + seg_of_col[c]];
                }
            });
        }
        Op::Pick(x, idx) => acc(nodes, grads, *x, |buf| {
            for (gv, &i) in g.iter().zip(idx) {
                buf[i] += gv;
            }
        }),
        Op::CrossEntropy { logits, targets, probs, count } => {
            let v = val(*logits).last_dim();
            let scale = g[0] / *count as f64;
            acc(nodes, grads, *logits, |buf| {
                for (r, tgt) in targets.iter().enumerate() {
                    let Some(c) = *tgt else { continue };
                    for j in 0..v {
                        buf[r * v + j] += scale * probs[r * v + j];
                    }
                    buf[r * v + c] -= scale;
                }
            });
        }
        Op::Bce { logits, labels } => {
            let n = labels.len() as f64;
            let zd = val(*logits).data();
            acc(nodes, grads, *logits, |buf| {
                for ((b, &z), &y) in buf.iter_mut().zip(zd).zip(labels) {
                    let s = 1.0 / (1.0 + (-z).exp());
                    *b += g[0] * (s - y) / n;
                }
            });
        }
        Op::Custom { op, inputs } => {
            let vals: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
            let gs = op.backward(&vals, out, g);
            for (v, gi) in inputs.iter().zip(gs) {
                acc(nodes, grads, *v, |buf| add_into(buf, &gi));
            }
        }
    }
}
