//! Define-by-run tape over a closed set of differentiable operations.
//!
//! Every op computes its value eagerly when it is recorded. `backward`
//! walks the tape in reverse and returns gradients for every node.

use super::tensor::gemm;
use super::{AutodiffError, ParameterSet, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask: `allowed(i, j)` keeps entry `(i, j)`.
///
/// Equivalent to an additive mask with `0` on allowed entries and `-∞`
/// elsewhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Mask { rows, cols, allowed }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, allowed: vec![true; rows * cols] }
    }

    /// `allowed(i, j) = j ≤ i`.
    pub fn causal(n: usize) -> Self {
        Mask::from_fn(n, n, |i, j| j <= i)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row_allowed_count(&self, i: usize) -> usize {
        self.allowed[i * self.cols..(i + 1) * self.cols].iter().filter(|&&a| a).count()
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Softmax { input: Var, reweight: Option<Var>, probs: Tensor, row_sums: Vec<f64> },
    LayerNorm { input: Var, gain: Var, bias: Var, normed: Tensor, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    StackRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    Cosine { a: Var, b: Var, a_norms: Vec<f64>, b_norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// How the right operand of an elementwise op lines up with the left.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Row,
    Column,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast, AutodiffError> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.rows() == 1 && b.cols() == 1 {
        Ok(Broadcast::Scalar)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(Broadcast::Row)
    } else if b.cols() == 1 && b.rows() == a.rows() {
        Ok(Broadcast::Column)
    } else {
        Err(AutodiffError::shape(op, a.shape(), b.shape()))
    }
}

#[inline]
fn rhs_index(kind: Broadcast, cols: usize, idx: usize) -> usize {
    match kind {
        Broadcast::Same => idx,
        Broadcast::Row => idx % cols,
        Broadcast::Column => idx / cols,
        Broadcast::Scalar => 0,
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Recording tape bound to a parameter set.
pub struct Graph<'p> {
    params: &'p ParameterSet,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Graph { params, param_vars: vec![None; params.len()], nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParameterSet {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64, AutodiffError> {
        let t = self.value(v);
        t.item().ok_or_else(|| AutodiffError::NonScalarLoss(t.shape().to_vec()))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; receives a gradient but is never updated.
    pub fn input(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        self.push(value, Op::Leaf, "input")
    }

    /// Parameter leaf. Repeated calls with the same name return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var, AutodiffError> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?;
        if let Some(v) = self.param_vars[idx] {
            return Ok(v);
        }
        let value = self.params.by_index(idx).expect("index from index_of").1.clone();
        let v = self.push(value, Op::Param, "param")?;
        self.param_vars[idx] = Some(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), "transpose")
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(name, ta, tb)?;
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[rhs_index(kind, cols, i)]))
            .collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        self.push(value, op, name)
    }

    /// `a + b`; `b` may broadcast as a row, column or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), "scale")
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::Offset(a), "offset")
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let neg = self.scale(a, -1.0)?;
        self.offset(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a), "log")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a), "abs")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), "relu")
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi), "clamp")
    }

    /// Row softmax of `input`, restricted to `mask` when given, then
    /// optionally multiplied by `reweight` and renormalized per row.
    ///
    /// Without a reweight this is `α = softmax(x + M)`. With one it is
    /// `γ = (α ⊙ w) / rowsum(α ⊙ w)`.
    pub fn softmax(&mut self, input: Var, mask: Option<&Mask>, reweight: Option<Var>) -> Result<Var, AutodiffError> {
        let x = self.value(input);
        let (rows, cols) = (x.rows(), x.cols());
        if let Some(m) = mask {
            if m.rows() != rows || m.cols() != cols {
                return Err(AutodiffError::shape("softmax mask", x.shape(), [m.rows(), m.cols()]));
            }
        }
        if let Some(w) = reweight {
            if self.value(w).shape() != x.shape() {
                return Err(AutodiffError::shape("softmax reweight", x.shape(), self.value(w).shape()));
            }
        }
        let mut probs = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let row = x.row_slice(i);
            let keep = |j: usize| mask.is_none_or(|m| m.allowed(i, j));
            let max = (0..cols).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(AutodiffError::EmptySoftmaxRow(i));
            }
            let mut total = 0.0;
            for j in 0..cols {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    probs.set(i, j, e);
                    total += e;
                }
            }
            for j in 0..cols {
                probs.set(i, j, probs.get(i, j) / total);
            }
        }
        let (value, row_sums) = match reweight {
            None => (probs.clone(), Vec::new()),
            Some(w) => {
                let w = self.value(w);
                let mut out = Tensor::zeros(rows, cols);
                let mut sums = Vec::with_capacity(rows);
                for i in 0..rows {
                    let mut s = 0.0;
                    for j in 0..cols {
                        let v = probs.get(i, j) * w.get(i, j);
                        out.set(i, j, v);
                        s += v;
                    }
                    assert!(s > 0.0, "reweighted softmax row {i} has zero mass");
                    for j in 0..cols {
                        out.set(i, j, out.get(i, j) / s);
                    }
                    sums.push(s);
                }
                (out, sums)
            }
        };
        self.push(value, Op::Softmax { input, reweight, probs, row_sums }, "softmax")
    }

    /// Per-row layer normalization with learned `gain` and `bias` rows.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var) -> Result<Var, AutodiffError> {
        let x = self.value(input);
        let (rows, cols) = (x.rows(), x.cols());
        for v in [gain, bias] {
            let t = self.value(v);
            if t.shape() != [1, cols] {
                return Err(AutodiffError::shape("layer_norm", x.shape(), t.shape()));
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut normed = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = x.row_slice(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..cols {
                let n = (row[j] - mean) * inv;
                normed.set(i, j, n);
                out.set(i, j, n * g.get(0, j) + b.get(0, j));
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { input, gain, bias, normed, inv_std }, "layer_norm")
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(AutodiffError::IndexOutOfRange { what: "embedding table", index: id, size: t.rows() });
            }
            out.data_mut()[r * t.cols()..(r + 1) * t.cols()].copy_from_slice(t.row_slice(id));
        }
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, "embedding")
    }

    /// Concatenates row blocks with equal column counts.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or_else(|| AutodiffError::InvalidTensor("stack_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(AutodiffError::shape("stack_rows", self.value(*first).shape(), t.shape()));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        self.push(value, Op::StackRows(parts.to_vec()), "stack_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(AutodiffError::InvalidTensor("mean of empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), "mean")
    }

    /// 1-D max pooling over a vector (either orientation). Windows start
    /// every `stride` entries; a trailing partial window is kept. Ties
    /// resolve to the lowest index.
    pub fn max_pool1d(&mut self, a: Var, kernel: usize, stride: usize) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if t.rows() != 1 && t.cols() != 1 {
            return Err(AutodiffError::shape("max_pool1d", t.shape(), [t.len(), 1]));
        }
        if kernel == 0 || stride == 0 {
            return Err(AutodiffError::InvalidTensor("max_pool1d kernel and stride must be positive".into()));
        }
        let x = t.data();
        let mut argmax = Vec::new();
        let mut start = 0;
        while start < x.len() {
            let end = (start + kernel).min(x.len());
            let mut best = start;
            for i in start + 1..end {
                if x[i] > x[best] {
                    best = i;
                }
            }
            argmax.push(best);
            start += stride;
        }
        let values: Vec<f64> = argmax.iter().map(|&i| x[i]).collect();
        let out = if t.cols() == 1 { Tensor::column(&values) } else { Tensor::row(&values) };
        self.push(out, Op::MaxPool { input: a, argmax }, "max_pool1d")
    }

    /// Pairwise cosine similarity between the rows of `a` (K×d) and `b`
    /// (M×d), giving a K×M matrix.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(AutodiffError::shape("cosine_similarity", ta.shape(), tb.shape()));
        }
        let norms = |t: &Tensor, which: &'static str| -> Result<Vec<f64>, AutodiffError> {
            (0..t.rows())
                .map(|r| {
                    let n = t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        Ok(n)
                    } else {
                        Err(AutodiffError::ZeroNorm { operand: which, row: r })
                    }
                })
                .collect()
        };
        let a_norms = norms(ta, "left")?;
        let b_norms = norms(tb, "right")?;
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        gemm(ta, false, tb, true, &mut out, false);
        for i in 0..ta.rows() {
            for j in 0..tb.rows() {
                out.set(i, j, out.get(i, j) / (a_norms[i] * b_norms[j]));
            }
        }
        self.push(out, Op::Cosine { a, b, a_norms, b_norms }, "cosine_similarity")
    }

    /// Summed cross-entropy of row logits against target column ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(logits);
        if t.rows() != targets.len() {
            return Err(AutodiffError::shape("cross_entropy", t.shape(), [targets.len(), t.cols()]));
        }
        let mut probs = Tensor::zeros(t.rows(), t.cols());
        let mut loss = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            if target >= t.cols() {
                return Err(AutodiffError::IndexOutOfRange { what: "cross_entropy target", index: target, size: t.cols() });
            }
            let row = t.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            for (j, v) in row.iter().enumerate() {
                probs.set(i, j, (v - lse).exp());
            }
            loss += lse - row[target];
        }
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, "cross_entropy")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lt = self.value(loss);
        if lt.shape() != [1, 1] {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, ta);
                gemm(g, false, tb, true, ga, true);
                let gb = slot(grads, *b, tb);
                gemm(ta, true, g, false, gb, true);
            }
            Op::Transpose(a) => {
                let ga = slot(grads, *a, self.value(*a));
                ga.add_assign(&g.transpose());
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let ta = self.value(*a);
                slot(grads, *a, ta).add_assign(g);
                let tb = self.value(*b);
                let kind = broadcast_kind("add", ta, tb).expect("checked in forward");
                let gb = slot(grads, *b, tb);
                for (i, &v) in g.data().iter().enumerate() {
                    gb.data_mut()[rhs_index(kind, ta.cols(), i)] += sign * v;
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let kind = broadcast_kind("mul", ta, tb).expect("checked in forward");
                let cols = ta.cols();
                {
                    let ga = slot(grads, *a, ta);
                    for (i, &v) in g.data().iter().enumerate() {
                        ga.data_mut()[i] += v * tb.data()[rhs_index(kind, cols, i)];
                    }
                }
                let gb = slot(grads, *b, tb);
                for (i, &v) in g.data().iter().enumerate() {
                    gb.data_mut()[rhs_index(kind, cols, i)] += v * ta.data()[i];
                }
            }
            Op::Scale(a, f) => unary(grads, *a, self.value(*a), g, |_, gv| gv * f),
            Op::Offset(a) => unary(grads, *a, self.value(*a), g, |_, gv| gv),
            Op::Sigmoid(a) => {
                unary(grads, *a, self.value(*a), g, |i, gv| {
                    let s = out.data()[i];
                    gv * s * (1.0 - s)
                })
            }
            Op::Tanh(a) => {
                unary(grads, *a, self.value(*a), g, |i, gv| {
                    let t = out.data()[i];
                    gv * (1.0 - t * t)
                })
            }
            Op::Exp(a) => unary(grads, *a, self.value(*a), g, |i, gv| gv * out.data()[i]),
            Op::Log(a) => {
                let x = self.value(*a);
                unary(grads, *a, x, g, |i, gv| gv / x.data()[i])
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                unary(grads, *a, x, g, |i, gv| {
                    let v = x.data()[i];
                    if v > 0.0 {
                        gv
                    } else if v < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                unary(grads, *a, x, g, |i, gv| if x.data()[i] > 0.0 { gv } else { 0.0 })
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                unary(grads, *a, x, g, |i, gv| {
                    let v = x.data()[i];
                    if v >= *lo && v <= *hi {
                        gv
                    } else {
                        0.0
                    }
                })
            }
            Op::Softmax { input, reweight, probs, row_sums } => {
                let (rows, cols) = (probs.rows(), probs.cols());
                // Gradient with respect to the pre-reweight probabilities α.
                let mut d_alpha = Tensor::zeros(rows, cols);
                match reweight {
                    None => d_alpha.add_assign(g),
                    Some(w) => {
                        let tw = self.value(*w);
                        let mut d_w = Tensor::zeros(rows, cols);
                        for i in 0..rows {
                            let dot: f64 = (0..cols).map(|j| g.get(i, j) * out.get(i, j)).sum();
                            for j in 0..cols {
                                let d_tilde = (g.get(i, j) - dot) / row_sums[i];
                                d_alpha.set(i, j, d_tilde * tw.get(i, j));
                                d_w.set(i, j, d_tilde * probs.get(i, j));
                            }
                        }
                        slot(grads, *w, tw).add_assign(&d_w);
                    }
                }
                let tx = self.value(*input);
                let gx = slot(grads, *input, tx);
                for i in 0..rows {
                    let dot: f64 = (0..cols).map(|j| d_alpha.get(i, j) * probs.get(i, j)).sum();
                    for j in 0..cols {
                        let p = probs.get(i, j);
                        let v = gx.get(i, j) + p * (d_alpha.get(i, j) - dot);
                        gx.set(i, j, v);
                    }
                }
            }
            Op::LayerNorm { input, gain, bias, normed, inv_std } => {
                let (rows, cols) = (normed.rows(), normed.cols());
                let tg = self.value(*gain);
                let mut d_gain = Tensor::zeros(1, cols);
                let mut d_bias = Tensor::zeros(1, cols);
                let mut d_x = Tensor::zeros(rows, cols);
                let n = cols as f64;
                for i in 0..rows {
                    let mut sum_d = 0.0;
                    let mut sum_dn = 0.0;
                    for j in 0..cols {
                        let gy = g.get(i, j);
                        d_gain.data_mut()[j] += gy * normed.get(i, j);
                        d_bias.data_mut()[j] += gy;
                        let dn = gy * tg.get(0, j);
                        sum_d += dn;
                        sum_dn += dn * normed.get(i, j);
                    }
                    for j in 0..cols {
                        let dn = g.get(i, j) * tg.get(0, j);
                        d_x.set(i, j, inv_std[i] / n * (n * dn - sum_d - normed.get(i, j) * sum_dn));
                    }
                }
                slot(grads, *input, self.value(*input)).add_assign(&d_x);
                slot(grads, *gain, tg).add_assign(&d_gain);
                slot(grads, *bias, self.value(*bias)).add_assign(&d_bias);
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let cols = tt.cols();
                let gt = slot(grads, *table, tt);
                for (r, &id) in ids.iter().enumerate() {
                    let src = g.row_slice(r);
                    let dst = &mut gt.data_mut()[id * cols..(id + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.len();
                    let gp = slot(grads, p, tp);
                    for (d, s) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                        *d += s;
                    }
                    offset += n;
                }
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                unary(grads, *a, self.value(*a), g, |_, _| gv)
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let gv = g.data()[0] / ta.len() as f64;
                unary(grads, *a, ta, g, |_, _| gv)
            }
            Op::MaxPool { input, argmax } => {
                let ga = slot(grads, *input, self.value(*input));
                for (o, &i) in argmax.iter().enumerate() {
                    ga.data_mut()[i] += g.data()[o];
                }
            }
            Op::Cosine { a, b, a_norms, b_norms } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let d = ta.cols();
                let mut da = Tensor::zeros(ta.rows(), d);
                let mut db = Tensor::zeros(tb.rows(), d);
                for i in 0..ta.rows() {
                    for j in 0..tb.rows() {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        let c = out.get(i, j);
                        let inv_ab = 1.0 / (a_norms[i] * b_norms[j]);
                        let inv_aa = c / (a_norms[i] * a_norms[i]);
                        let inv_bb = c / (b_norms[j] * b_norms[j]);
                        for k in 0..d {
                            let (av, bv) = (ta.get(i, k), tb.get(j, k));
                            da.data_mut()[i * d + k] += gij * (bv * inv_ab - av * inv_aa);
                            db.data_mut()[j * d + k] += gij * (av * inv_ab - bv * inv_bb);
                        }
                    }
                }
                slot(grads, *a, ta).add_assign(&da);
                slot(grads, *b, tb).add_assign(&db);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let gv = g.data()[0];
                let gl = slot(grads, *logits, self.value(*logits));
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..probs.cols() {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        let v = gl.get(i, j) + gv * (probs.get(i, j) - onehot);
                        gl.set(i, j, v);
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.rows(), like.cols()))
}

fn unary(grads: &mut [Option<Tensor>], a: Var, like: &Tensor, g: &Tensor, f: impl Fn(usize, f64) -> f64) {
    let ga = slot(grads, a, like);
    if g.len() == ga.len() {
        for (i, (d, &gv)) in ga.data_mut().iter_mut().zip(g.data()).enumerate() {
            *d += f(i, gv);
        }
    } else {
        // Reductions: `g` is a scalar broadcast over the input.
        let gv = g.data()[0];
        for (i, d) in ga.data_mut().iter_mut().enumerate() {
            *d += f(i, gv);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients for every node of one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of the graph's set, zero where unused.
    pub fn parameters(&self, graph: &Graph<'_>) -> ParameterSet {
        let mut out = graph.params.zeros_like();
        self.accumulate_into(graph, &mut out);
        out
    }

    /// Adds the parameter gradients into `acc`, which must share the
    /// graph's parameter layout.
    pub fn accumulate_into(&self, graph: &Graph<'_>, acc: &mut ParameterSet) {
        for (idx, var) in graph.param_vars.iter().enumerate() {
            if let Some(g) = var.and_then(|v| self.wrt(v)) {
                acc.tensor_at_mut(idx).add_assign(g);
            }
        }
    }
}
