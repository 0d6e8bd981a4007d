use std::collections::BTreeMap;

use super::kernels::{self, axpy, dot, matmul, matmul_nt, matmul_tn_acc, softmax_row};
use super::params::{ParamId, ParamRegistry};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multi-head scaled dot-product attention layout.
///
/// Queries are `[batch*q_len, d]`, keys and values `[batch*k_len, d]`. The
/// query block is aligned to the END of the key block, so query `i` sits at
/// absolute position `k_len - q_len + i`. A padded key is masked for every
/// query except the one at its own position, which keeps the diagonal open.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub causal: bool,
    pub key_pad: Option<Vec<bool>>,
}

impl AttnSpec {
    pub fn causal(batch: usize, heads: usize, len: usize) -> Self {
        Self {
            batch,
            heads,
            q_len: len,
            k_len: len,
            causal: true,
            key_pad: None,
        }
    }

    fn offset(&self) -> usize {
        self.k_len - self.q_len
    }

    fn key_end(&self, i: usize) -> usize {
        if self.causal {
            self.offset() + i + 1
        } else {
            self.k_len
        }
    }

    fn masked(&self, b: usize, i: usize, j: usize) -> bool {
        match &self.key_pad {
            Some(pad) => pad[b * self.k_len + j] && j != self.offset() + i,
            None => false,
        }
    }
}

/// Every differentiable op the tape records, by [`Graph::op_name`].
pub const KERNELS: [&str; 24] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "relu",
    "gelu",
    "sigmoid",
    "tanh",
    "gather",
    "concat_cols",
    "concat_rows",
    "slice_rows",
    "slice_cols",
    "reshape",
    "mean_pool",
    "cosine_similarity",
    "layer_norm",
    "softmax",
    "cross_entropy",
    "attention",
    "sum",
    "mean",
];

enum Op<F: Real> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gather { src: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows { parts: Vec<Var>, groups: usize },
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    Reshape(Var),
    MeanPool { src: Var, group: usize },
    CosSim(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<F> },
    Sum(Var),
    Mean(Var),
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// The tape: values in creation order, each op after all of its inputs.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<F: Real> {
    params: BTreeMap<ParamId, Tensor<F>>,
    vars: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<F>> {
        self.vars.get(v.0).and_then(Option::as_ref)
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: F) {
        for t in self.params.values_mut() {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }
}

fn slot<'a, F: Real>(grads: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> &'a mut Vec<F> {
    let len = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input indices of every recorded op, for tape-order checks.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias(a, b) | Op::CosSim(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Gather { src, .. }
            | Op::SliceRows { src, .. }
            | Op::SliceCols { src, .. }
            | Op::MeanPool { src, .. } => vec![*src],
            Op::ConcatCols(p) => p.clone(),
            Op::ConcatRows { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::NotOnTape(v.0))
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    /// Records a parameter; frozen parameters enter the tape as constants.
    pub fn param(&mut self, reg: &ParamRegistry<F>, id: ParamId) -> Var {
        let p = reg.param(id);
        self.push(p.value.clone(), Op::Param(id), !p.frozen)
    }

    /// Attention probabilities `[batch, heads, q_len, k_len]` recorded by an
    /// attention op.
    /// Kernel that produced `v`; `"leaf"` and `"param"` for inputs.
    pub fn op_name(&self, v: Var) -> &'static str {
        match &self.nodes[v.0].op {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Gather { .. } => "gather",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(_) => "reshape",
            Op::MeanPool { .. } => "mean_pool",
            Op::CosSim(..) => "cosine_similarity",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Attention { .. } => "attention",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    pub fn op_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        (0..self.nodes.len()).map(|i| self.op_name(Var(i)))
    }

    pub fn attention_probs(&self, v: Var) -> Option<(&AttnSpec, &[F])> {
        match &self.nodes[v.0].op {
            Op::Attention { spec, probs, .. } => Some((spec, probs)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(mismatch("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = Tensor::new(vec![m, n], matmul(av.data(), bv.data(), m, k, n))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op, av.shape(), bv.shape()));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a `[d]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.cols();
        if bv.numel() != d {
            return Err(mismatch("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (r, &b) in row.iter_mut().zip(bv.data()) {
                *r += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn map(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, op, rg))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| if v > F::zero() { v } else { F::zero() })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), |v| v.tanh())
    }

    /// Row gather: output row `r` is row `ids[r]` of `table`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let tv = self.value(table);
        let (rows, d) = (tv.rows(), tv.cols());
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding_gather",
                msg: "no indices".into(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(TensorError::Invalid {
                    op: "embedding_gather",
                    msg: format!("index {i} out of range for {rows} rows"),
                });
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Gather {
                src: table,
                idx: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_last_axis",
                msg: "no inputs".into(),
            });
        }
        for &p in parts {
            self.check(p)?;
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(mismatch("concat_last_axis", self.value(parts[0]).shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat_rows_grouped(parts, 1)
    }

    /// Per-group row concatenation: each part is split into `groups` equal
    /// row blocks and the output is `[p0_g0; p1_g0; …; p0_g1; p1_g1; …]`.
    pub fn concat_rows_grouped(&mut self, parts: &[Var], groups: usize) -> Result<Var> {
        if parts.is_empty() || groups == 0 {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        }
        for &p in parts {
            self.check(p)?;
        }
        let d = self.value(parts[0]).cols();
        let mut total_rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != d || v.rows() % groups != 0 {
                return Err(mismatch("concat_rows", self.value(parts[0]).shape(), v.shape()));
            }
            total_rows += v.rows();
        }
        let mut data = Vec::with_capacity(total_rows * d);
        for g in 0..groups {
            for &p in parts {
                let v = self.value(p);
                let per = v.rows() / groups;
                data.extend_from_slice(&v.data()[g * per * d..(g + 1) * per * d]);
            }
        }
        let out = Tensor::new(vec![total_rows, d], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
                groups,
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if start >= end || end > xv.rows() {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("bounds {start}..{end} for {} rows", xv.rows()),
            });
        }
        let d = xv.cols();
        let out = Tensor::new(vec![end - start, d], xv.data()[start * d..end * d].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows { src: x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if start >= end || end > xv.cols() {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("bounds {start}..{end} for {} cols", xv.cols()),
            });
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let out = Tensor::new(vec![rows, end - start], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { src: x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Averages consecutive blocks of `group` rows.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if group == 0 || xv.rows() % group != 0 {
            return Err(TensorError::Invalid {
                op: "mean_pool",
                msg: format!("{} rows not divisible by group {group}", xv.rows()),
            });
        }
        let d = xv.cols();
        let n = xv.rows() / group;
        let inv = F::one() / F::of(group as f64);
        let mut data = vec![F::zero(); n * d];
        for r in 0..xv.rows() {
            let o = r / group;
            for (acc, &v) in data[o * d..(o + 1) * d].iter_mut().zip(xv.row(r)) {
                *acc += v;
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let out = Tensor::new(vec![n, d], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanPool { src: x, group }, rg))
    }

    /// Row-wise cosine similarity, `[n×d], [n×d] → [n×1]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.rows();
        let mut data = Vec::with_capacity(n);
        for r in 0..n {
            let (x, y) = (av.row(r), bv.row(r));
            let (nx, ny) = (dot(x, x).sqrt(), dot(y, y).sqrt());
            if nx == F::zero() || ny == F::zero() {
                return Err(TensorError::ZeroNorm { row: r });
            }
            data.push(dot(x, y) / (nx * ny));
        }
        let out = Tensor::new(vec![n, 1], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::CosSim(a, b), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let xv = self.value(x);
        let d = xv.cols();
        if d < 2 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "normalized axis must have at least 2 entries".into(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "eps must be positive".into(),
            });
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != d || bv.numel() != d {
            return Err(mismatch("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let inv_d = F::one() / F::of(d as f64);
        let mut xhat = vec![F::zero(); rows * d];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + F::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last axis; `-inf` entries are masked to exactly zero.
    pub fn softmax_last_axis(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        let d = xv.cols();
        for (r, row) in data.chunks_exact_mut(d).enumerate() {
            if !softmax_row(row) {
                return Err(TensorError::FullyMasked { row: r });
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_from_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        let (b, c) = (lv.rows(), lv.cols());
        if targets.len() != b {
            return Err(mismatch("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        for (r, row) in probs.chunks_exact_mut(c).enumerate() {
            let t = targets[r];
            if t >= c {
                return Err(TensorError::TargetOutOfRange {
                    target: t,
                    classes: c,
                });
            }
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            // relative to the max so a tie at the top gives exactly ln(count)
            let shifted = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            let lse = shifted + max;
            total += (shifted - (row[t] - max)).as_f64();
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let out = Tensor::scalar(F::of(total / b as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Multi-head attention `softmax(QKᵀ/√d_head + C)·V` with the mask `C`
    /// described by `spec`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        self.check(q)?;
        self.check(k)?;
        self.check(v)?;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let AttnSpec {
            batch,
            heads,
            q_len,
            k_len,
            ..
        } = spec;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("width {d} not divisible by {heads} heads"),
            });
        }
        if qv.rows() != batch * q_len
            || kv.rows() != batch * k_len
            || kv.shape() != vv.shape()
            || kv.cols() != d
            || q_len > k_len
        {
            return Err(mismatch("attention", qv.shape(), kv.shape()));
        }
        if let Some(pad) = &spec.key_pad {
            if pad.len() != batch * k_len {
                return Err(mismatch("attention", &[batch * k_len], &[pad.len()]));
            }
        }
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut probs = vec![F::zero(); batch * heads * q_len * k_len];
        let mut out = vec![F::zero(); batch * q_len * d];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..q_len {
                    let qrow = &qv.row(b * q_len + i)[h * dh..(h + 1) * dh];
                    let base = ((b * heads + h) * q_len + i) * k_len;
                    let end = spec.key_end(i);
                    let row = &mut probs[base..base + end];
                    for (j, p) in row.iter_mut().enumerate() {
                        *p = if spec.masked(b, i, j) {
                            F::neg_infinity()
                        } else {
                            dot(qrow, &kv.row(b * k_len + j)[h * dh..(h + 1) * dh]) * scale
                        };
                    }
                    if !softmax_row(row) {
                        return Err(TensorError::FullyMasked {
                            row: (b * heads + h) * q_len + i,
                        });
                    }
                    let orow = &mut out[(b * q_len + i) * d + h * dh..(b * q_len + i) * d + (h + 1) * dh];
                    for (j, &p) in row.iter().enumerate() {
                        if p != F::zero() {
                            axpy(orow, p, &vv.row(b * k_len + j)[h * dh..(h + 1) * dh]);
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch * q_len, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<F>() / F::of(xv.numel() as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Reverse-mode accumulation from a scalar `loss`. A tape supports one
    /// backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        self.check(loss)?;
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params: BTreeMap<ParamId, Tensor<F>> = BTreeMap::new();
        let mut vars = Vec::with_capacity(n);
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            let t = g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"));
            if let (Op::Param(id), Some(t)) = (&node.op, &t) {
                match params.get_mut(id) {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        params.insert(*id, t.clone());
                    }
                }
            }
            vars.push(t);
        }
        Ok(Gradients { params, vars })
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if want(*a) {
                    let da = matmul_nt(g, bv.data(), m, n, k);
                    for (x, y) in acc!(*a).iter_mut().zip(da) {
                        *x += y;
                    }
                }
                if want(*b) {
                    matmul_tn_acc(acc!(*b), av.data(), g, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        axpy(acc!(v), F::one(), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    axpy(acc!(*a), F::one(), g);
                }
                if want(*b) {
                    axpy(acc!(*b), -F::one(), g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if want(*a) {
                    for ((x, &gi), &y) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *x += gi * y;
                    }
                }
                if want(*b) {
                    for ((x, &gi), &y) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *x += gi * y;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if want(*x) {
                    axpy(acc!(*x), F::one(), g);
                }
                if want(*b) {
                    let db = acc!(*b);
                    let d = db.len();
                    for row in g.chunks_exact(d) {
                        axpy(db, F::one(), row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if want(*x) {
                    axpy(acc!(*x), *c, g);
                }
            }
            Op::Relu(x) => {
                if want(*x) {
                    let xv = nodes[x.0].value.data();
                    for ((a, &gi), &v) in acc!(*x).iter_mut().zip(g).zip(xv) {
                        if v > F::zero() {
                            *a += gi;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if want(*x) {
                    let xv = nodes[x.0].value.data();
                    for ((a, &gi), &v) in acc!(*x).iter_mut().zip(g).zip(xv) {
                        *a += gi * kernels::gelu_grad(v);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if want(*x) {
                    let y = node.value.data();
                    for ((a, &gi), &s) in acc!(*x).iter_mut().zip(g).zip(y) {
                        *a += gi * s * (F::one() - s);
                    }
                }
            }
            Op::Tanh(x) => {
                if want(*x) {
                    let y = node.value.data();
                    for ((a, &gi), &t) in acc!(*x).iter_mut().zip(g).zip(y) {
                        *a += gi * (F::one() - t * t);
                    }
                }
            }
            Op::Gather { src, idx } => {
                if want(*src) {
                    let d = node.value.cols();
                    let dst = acc!(*src);
                    for (r, &s) in idx.iter().enumerate() {
                        axpy(&mut dst[s * d..(s + 1) * d], F::one(), &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if want(p) {
                        let dst = acc!(p);
                        for r in 0..rows {
                            axpy(&mut dst[r * w..(r + 1) * w], F::one(), &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows { parts, groups } => {
                let d = node.value.cols();
                let mut off = 0;
                for gidx in 0..*groups {
                    for &p in parts {
                        let per = nodes[p.0].value.rows() / groups;
                        if want(p) {
                            let dst = acc!(p);
                            axpy(
                                &mut dst[gidx * per * d..(gidx + 1) * per * d],
                                F::one(),
                                &g[off * d..(off + per) * d],
                            );
                        }
                        off += per;
                    }
                }
            }
            Op::SliceRows { src, start } => {
                if want(*src) {
                    let d = node.value.cols();
                    axpy(&mut acc!(*src)[start * d..start * d + g.len()], F::one(), g);
                }
            }
            Op::SliceCols { src, start } => {
                if want(*src) {
                    let w = node.value.cols();
                    let sc = nodes[src.0].value.cols();
                    let dst = acc!(*src);
                    for r in 0..node.value.rows() {
                        axpy(&mut dst[r * sc + start..r * sc + start + w], F::one(), &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::Reshape(x) => {
                if want(*x) {
                    axpy(acc!(*x), F::one(), g);
                }
            }
            Op::MeanPool { src, group } => {
                if want(*src) {
                    let d = node.value.cols();
                    let inv = F::one() / F::of(*group as f64);
                    let dst = acc!(*src);
                    for r in 0..nodes[src.0].value.rows() {
                        let o = r / group;
                        axpy(&mut dst[r * d..(r + 1) * d], inv, &g[o * d..(o + 1) * d]);
                    }
                }
            }
            Op::CosSim(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                for r in 0..av.rows() {
                    let (x, y) = (av.row(r), bv.row(r));
                    let (nx, ny) = (dot(x, x).sqrt(), dot(y, y).sqrt());
                    let s = node.value.data()[r];
                    let gr = g[r];
                    let d = x.len();
                    if want(*a) {
                        let dst = &mut acc!(*a)[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += gr * (y[j] / (nx * ny) - s * x[j] / (nx * nx));
                        }
                    }
                    if want(*b) {
                        let dst = &mut acc!(*b)[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += gr * (x[j] / (nx * ny) - s * y[j] / (ny * ny));
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gv = nodes[gain.0].value.data();
                if want(*gain) {
                    let dg = acc!(*gain);
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if want(*bias) {
                    let db = acc!(*bias);
                    for grow in g.chunks_exact(d) {
                        axpy(db, F::one(), grow);
                    }
                }
                if want(*x) {
                    let dx = acc!(*x);
                    let inv_d = F::one() / F::of(d as f64);
                    let mut dh = vec![F::zero(); d];
                    for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                            m1 += dh[j];
                            m2 += dh[j] * hrow[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if want(*x) {
                    let d = node.value.cols();
                    let dst = acc!(*x);
                    for (r, (grow, yrow)) in g.chunks_exact(d).zip(node.value.data().chunks_exact(d)).enumerate() {
                        let s = dot(grow, yrow);
                        for j in 0..d {
                            dst[r * d + j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if want(*logits) {
                    let c = nodes[logits.0].value.cols();
                    let b = targets.len();
                    let scale = g[0] / F::of(b as f64);
                    let dst = acc!(*logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { F::one() } else { F::zero() };
                            dst[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, g, grads),
            Op::Sum(x) => {
                if want(*x) {
                    for a in acc!(*x).iter_mut() {
                        *a += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if want(*x) {
                    let dst = acc!(*x);
                    let c = g[0] / F::of(dst.len() as f64);
                    for a in dst.iter_mut() {
                        *a += c;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let nodes = &self.nodes;
        let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let d = qv.cols();
        let (batch, heads, q_len, k_len) = (spec.batch, spec.heads, spec.q_len, spec.k_len);
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let (wq, wk, wv) = (nodes[q.0].requires_grad, nodes[k.0].requires_grad, nodes[v.0].requires_grad);
        let mut dq = if wq { vec![F::zero(); qv.numel()] } else { vec![] };
        let mut dk = if wk { vec![F::zero(); kv.numel()] } else { vec![] };
        let mut dv = if wv { vec![F::zero(); vv.numel()] } else { vec![] };
        let mut dp = vec![F::zero(); k_len];
        for b in 0..batch {
            for h in 0..heads {
                let hs = h * dh..(h + 1) * dh;
                for i in 0..q_len {
                    let base = ((b * heads + h) * q_len + i) * k_len;
                    let end = spec.key_end(i);
                    let p = &probs[base..base + end];
                    let gi = &g[(b * q_len + i) * d..(b * q_len + i + 1) * d][hs.clone()];
                    let mut s = F::zero();
                    for j in 0..end {
                        if p[j] != F::zero() {
                            dp[j] = dot(gi, &vv.row(b * k_len + j)[hs.clone()]);
                            s += p[j] * dp[j];
                        }
                    }
                    let qi = &qv.row(b * q_len + i)[hs.clone()];
                    for j in 0..end {
                        if p[j] == F::zero() {
                            continue;
                        }
                        let krow = (b * k_len + j) * d;
                        if wv {
                            axpy(&mut dv[krow + hs.start..krow + hs.end], p[j], gi);
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        if wq {
                            let qrow = (b * q_len + i) * d;
                            axpy(&mut dq[qrow + hs.start..qrow + hs.end], ds, &kv.row(b * k_len + j)[hs.clone()]);
                        }
                        if wk {
                            axpy(&mut dk[krow + hs.start..krow + hs.end], ds, qi);
                        }
                    }
                }
            }
        }
        for (var, delta, want) in [(q, dq, wq), (k, dk, wk), (v, dv, wv)] {
            if want {
                let len = nodes[var.0].value.numel();
                let dst = grads[var.0].get_or_insert_with(|| vec![F::zero(); len]);
                axpy(dst, F::one(), &delta);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let b = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let c = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(c).data(), g.value(b).data());
    }

    #[test]
    fn small_matmul_by_hand() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[0., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2., 4.]);
    }

    #[test]
    fn matmul_shape_error_reports_both() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[0.; 4]));
        let y = g.softmax_last_axis(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
        let m = g.constant(t(&[1, 2], &[3.7, f64::NEG_INFINITY]));
        let y = g.softmax_last_axis(m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
        let full = g.constant(t(&[1, 2], &[f64::NEG_INFINITY; 2]));
        assert!(matches!(g.softmax_last_axis(full), Err(TensorError::FullyMasked { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant(Tensor::full(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(t(&[1, 4], &[2.5; 4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-5 && (v[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 6]));
        let l = g.cross_entropy_from_logits(x, &[0, 3, 5]).unwrap();
        assert!((g.value(l).item() - 6f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 6];
        logits[2] = 20.0;
        let x = g.constant(t(&[1, 6], &logits));
        let l = g.cross_entropy_from_logits(x, &[2]).unwrap();
        // saturated: ln(1 + 5 e^-20) ≈ 1.03e-8
        let exact = (5.0 * (-20f64).exp()).ln_1p();
        assert!((g.value(l).item() - exact).abs() < 1e-15);
        assert!(g.value(l).item() < 1.1e-8);

        assert!(matches!(
            g.cross_entropy_from_logits(x, &[6]),
            Err(TensorError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1., 0., 3., -4.]));
        let b = g.constant(t(&[2, 2], &[0., 1., 3., -4.]));
        let s = g.cosine_similarity(a, b).unwrap();
        let v = g.value(s).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 1.0).abs() < 1e-15);
        let z = g.constant(t(&[1, 2], &[0., 0.]));
        let o = g.constant(t(&[1, 2], &[1., 0.]));
        assert!(matches!(g.cosine_similarity(z, o), Err(TensorError::ZeroNorm { row: 0 })));
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 3], vec![7., 8., 9.]).unwrap());
        let c = g.concat_rows(&[a, b]).unwrap();
        let s = g.slice_rows(c, 2, 3).unwrap();
        assert!(g.value(s).bit_eq(g.value(b)));
    }

    #[test]
    fn grouped_concat_interleaves() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::new(vec![4, 1], vec![1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![10., 20.]).unwrap());
        let c = g.concat_rows_grouped(&[a, b], 2).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 10., 3., 4., 20.]);
    }

    #[test]
    fn backward_sum_and_zero_scaled() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 2], &[1., -2., 3., 0.5]), true);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.var(x).unwrap().data(), &[1.0; 4]);
        assert!(matches!(g.backward(s), Err(TensorError::BackwardTwice)));

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 3], &[0.3, -0.2, 0.9]), true);
        let y = g.gelu(x).unwrap();
        let s = g.sum(y).unwrap();
        let z = g.scale(s, 0.0).unwrap();
        let grads = g.backward(z).unwrap();
        assert!(grads.var(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[2, 4], 0.5), true);
        let w = g.leaf(Tensor::full(&[4, 4], 0.1), true);
        let y = g.matmul(x, w).unwrap();
        let z = g.gelu(y).unwrap();
        let _ = g.mean(z).unwrap();
        for i in 0..g.len() {
            for p in g.parents(Var(i)) {
                assert!(p.0 < i);
            }
        }
    }

    #[test]
    fn attention_pad_diagonal_stays_open() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[3, 2], 1.0));
        let spec = AttnSpec {
            key_pad: Some(vec![true, true, false]),
            ..AttnSpec::causal(1, 1, 3)
        };
        let y = g.attention(x, x, x, spec).unwrap();
        let (_, p) = g.attention_probs(y).unwrap();
        // query 0 attends only to itself; query 2 ignores both pads
        assert_eq!(&p[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&p[6..9], &[0.0, 0.0, 1.0]);
    }
}
