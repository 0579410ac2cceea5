use std::borrow::Cow;

use super::kernels::{gelu, gelu_grad, gemm, softmax_in_place};
use super::{NumError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention block inside a packed batch: queries
/// `q_start..q_start+q_len` attend to keys/values `kv_start..kv_start+kv_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub segments: Vec<Segment>,
    /// Query `i` sees key `j` iff `j <= i + (kv_len - q_len)`.
    pub causal: bool,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: usize,
        count: usize,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        src: Var,
        index: Vec<usize>,
    },
    SliceRows {
        src: Var,
        start: usize,
    },
    MeanRows(Var),
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and `backward` walks it in reverse. Leaves may borrow
/// parameter tensors for the lifetime of the graph.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: &Tensor, right: &Tensor) -> NumError {
    NumError::Shape {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Owned leaf; differentiable iff the tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(Cow::Owned(t), Op::Leaf, rg)
    }

    /// Borrowed differentiable leaf.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Borrowed non-differentiable leaf.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Owned non-differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }

    // ---- forward operations ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = if trans_b {
            (tb.cols(), tb.rows())
        } else {
            (tb.rows(), tb.cols())
        };
        if k != kb || tb.shape().len() > 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), trans_b, &mut out, 0.0);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push_owned(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let src = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::matrix(c, r, out).expect("non-empty");
        self.push_owned(value, Op::Transpose(a), &[a])
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push_owned(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push_owned(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push_owned(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c {
            return Err(shape_err("add_row", tx, tb));
        }
        let b = tb.data();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push_owned(v, Op::AddRow { x, bias }, &[x, bias]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        let data = t.data().iter().map(|x| f(*x)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x * c);
        self.push_owned(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x + c);
        self.push_owned(v, Op::AddScalar(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.map(a, gelu);
        self.push_owned(v, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push_owned(v, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push_owned(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Euclidean norm over every element.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push_owned(Tensor::scalar(s), Op::L2Norm(a), &[a])
    }

    /// Row-wise normalisation to zero mean and unit variance (biased
    /// estimate, `eps` added to the variance) followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.len() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.len() != d {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push_owned(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let v = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push_owned(v, Op::Softmax(x), &[x])
    }

    /// Mean negative log-likelihood over positions whose target is not
    /// `pad`, computed with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var, NumError> {
        let t = self.value(logits);
        let (rows, classes) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(NumError::Shape {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, &target) in targets.iter().enumerate() {
            if target == pad {
                continue;
            }
            if target >= classes {
                return Err(NumError::TargetOutOfRange {
                    position: r,
                    target,
                    classes,
                });
            }
            let row = t.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[target];
            for (p, x) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(NumError::EmptyLoss);
        }
        let v = Tensor::scalar(total / count as f64);
        Ok(self.push_owned(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                count,
                probs,
            },
            &[logits],
        ))
    }

    /// Fused multi-head scaled dot-product attention over a packed batch.
    ///
    /// `q`, `k` and `v` hold one row per position with all heads side by
    /// side (`heads × head_dim` columns). The output has the shape of `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var, NumError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.cols() != d || tv.cols() != d || layout.heads == 0 || d % layout.heads != 0 {
            return Err(shape_err("attention", tq, tk));
        }
        if tk.rows() != tv.rows() {
            return Err(shape_err("attention", tk, tv));
        }
        for s in &layout.segments {
            let bad_q = s.q_start + s.q_len > tq.rows();
            let bad_kv = s.kv_start + s.kv_len > tk.rows();
            let bad_causal = layout.causal && s.q_len > s.kv_len;
            if bad_q || bad_kv || bad_causal || s.kv_len == 0 {
                return Err(NumError::Segment {
                    q_start: s.q_start,
                    q_len: s.q_len,
                    kv_start: s.kv_start,
                    kv_len: s.kv_len,
                });
            }
        }
        let heads = layout.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let total: usize = layout.segments.iter().map(|s| s.q_len * s.kv_len * heads).sum();
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; tq.len()];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut off = 0;
        for s in &layout.segments {
            let shift = s.kv_len - s.q_len.min(s.kv_len);
            for h in 0..heads {
                let block = &mut probs[off..off + s.q_len * s.kv_len];
                for i in 0..s.q_len {
                    let visible = if layout.causal { i + shift + 1 } else { s.kv_len };
                    let qrow = &qd[(s.q_start + i) * d + h * hd..][..hd];
                    let prow = &mut block[i * s.kv_len..(i + 1) * s.kv_len];
                    for (j, p) in prow.iter_mut().enumerate().take(visible) {
                        let krow = &kd[(s.kv_start + j) * d + h * hd..][..hd];
                        *p = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(&mut prow[..visible]);
                    let orow = &mut out[(s.q_start + i) * d + h * hd..][..hd];
                    for (j, &p) in prow.iter().enumerate().take(visible) {
                        let vrow = &vd[(s.kv_start + j) * d + h * hd..][..hd];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
                off += s.q_len * s.kv_len;
            }
        }
        let value = Tensor::new(tq.shape().to_vec(), out)?;
        Ok(self.push_owned(value, Op::Attention { q, k, v, layout, probs }, &[q, k, v]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = self.value(*parts.first().ok_or(NumError::EmptyInput("concat_rows"))?);
        let c = first.cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / c;
        let v = Tensor::matrix(rows, c, data)?;
        Ok(self.push_owned(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var, NumError> {
        let t = self.value(src);
        let (rows, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= rows {
                return Err(NumError::RowIndex { index: i, rows });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let v = Tensor::matrix(index.len(), c, data)?;
        Ok(self.push_owned(
            v,
            Op::GatherRows {
                src,
                index: index.to_vec(),
            },
            &[src],
        ))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let t = self.value(src);
        let (rows, c) = (t.rows(), t.cols());
        if len == 0 || start + len > rows {
            return Err(NumError::RowIndex {
                index: start + len,
                rows,
            });
        }
        let v = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push_owned(v, Op::SliceRows { src, start }, &[src]))
    }

    /// Column-wise mean over rows, giving a `1 × cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let v = Tensor::row(out).expect("non-empty");
        self.push_owned(v, Op::MeanRows(x), &[x])
    }

    /// Column-wise maximum over rows; ties resolve to the lowest row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, c) = (t.rows(), t.cols());
        let mut out = t.row_slice(0).to_vec();
        let mut argmax = vec![0; c];
        for r in 1..rows {
            for (j, v) in t.row_slice(r).iter().enumerate() {
                if *v > out[j] {
                    out[j] = *v;
                    argmax[j] = r;
                }
            }
        }
        let v = Tensor::row(out).expect("non-empty");
        self.push_owned(v, Op::MaxRows { x, argmax }, &[x])
    }

    // ---- reverse pass ------------------------------------------------------

    /// Populates gradient buffers for every differentiable node reachable
    /// from `loss`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if self.backward_done {
            return Err(NumError::AlreadyBackpropagated);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumError::NotScalar(lv.shape().to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn accumulate(&mut self, v: Var, contrib: impl FnOnce(&[Node<'a>], &mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let mut g = self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n]);
        contrib(&self.nodes, &mut g);
        self.grads[v.0] = Some(g);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // The op is moved out for the duration of the call so that input
        // values can be read while gradient buffers are written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.nodes[i].value.cols();
                self.accumulate(a, |nodes, ga| {
                    let bd = nodes[b.0].value.data();
                    gemm(m, n, k, g, false, bd, !trans_b, ga, 1.0);
                });
                self.accumulate(b, |nodes, gb| {
                    let ad = nodes[a.0].value.data();
                    if trans_b {
                        gemm(n, m, k, g, true, ad, false, gb, 1.0);
                    } else {
                        gemm(k, m, n, ad, true, g, false, gb, 1.0);
                    }
                });
            }
            Op::Transpose(a) => {
                let a = *a;
                let (r, c) = (self.value(a).rows(), self.value(a).cols());
                if let Some(ga) = self.buf(a) {
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                add_into(self.buf(a), g, 1.0);
                add_into(self.buf(b), g, 1.0);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                add_into(self.buf(a), g, 1.0);
                add_into(self.buf(b), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |nodes, ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(nodes[b.0].value.data()) {
                        *o += gi * y;
                    }
                });
                self.accumulate(b, |nodes, gb| {
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        *o += gi * x;
                    }
                });
            }
            Op::AddRow { x, bias } => {
                let (x, bias) = (*x, *bias);
                add_into(self.buf(x), g, 1.0);
                if let Some(gb) = self.buf(bias) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        for (o, gi) in gb.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                add_into(self.buf(a), g, c);
            }
            Op::AddScalar(a) => {
                let a = *a;
                add_into(self.buf(a), g, 1.0);
            }
            Op::Gelu(a) => {
                let a = *a;
                self.accumulate(a, |nodes, ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        *o += gi * gelu_grad(*x);
                    }
                });
            }
            Op::Relu(a) => {
                let a = *a;
                self.accumulate(a, |nodes, ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        if *x > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let a = *a;
                if let Some(ga) = self.buf(a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(a) => {
                let a = *a;
                if let Some(ga) = self.buf(a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::L2Norm(a) => {
                let a = *a;
                let norm = self.nodes[i].value.data()[0];
                if norm > 0.0 {
                    let s = g[0] / norm;
                    self.accumulate(a, |nodes, ga| {
                        for (o, x) in ga.iter_mut().zip(nodes[a.0].value.data()) {
                            *o += s * x;
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = self.value(x).cols();
                self.accumulate(gain, |_, gg| {
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += row_g[c] * row_h[c];
                        }
                    }
                });
                if let Some(gb) = self.buf(bias) {
                    for row_g in g.chunks(d) {
                        for (o, v) in gb.iter_mut().zip(row_g) {
                            *o += v;
                        }
                    }
                }
                self.accumulate(x, |nodes, gx| {
                    let gain = nodes[gain.0].value.data();
                    let mut dh = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let row_g = &g[r * d..(r + 1) * d];
                        let row_h = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            dh[c] = row_g[c] * gain[c];
                            mean_dh += dh[c];
                            mean_dh_h += dh[c] * row_h[c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            gx[r * d + c] += rs * (dh[c] - mean_dh - row_h[c] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let x = *x;
                let c = self.value(x).cols();
                self.accumulate(x, |nodes, gx| {
                    let y = nodes[i].value.data();
                    for ((go, gi), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gi.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            go[j] += yr[j] * (gi[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                count,
                probs,
            } => {
                let logits = *logits;
                let c = self.value(logits).cols();
                let s = g[0] / *count as f64;
                if let Some(gl) = self.buf(logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        let row = &mut gl[r * c..(r + 1) * c];
                        for (o, p) in row.iter_mut().zip(&probs[r * c..(r + 1) * c]) {
                            *o += s * p;
                        }
                        row[t] -= s;
                    }
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let (dq, dk, dv) = attention_backward(self.value(q), self.value(k), self.value(v), layout, probs, g);
                add_into(self.buf(q), &dq, 1.0);
                add_into(self.buf(k), &dk, 1.0);
                add_into(self.buf(v), &dv, 1.0);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    add_into(self.buf(p), &g[off..off + n], 1.0);
                    off += n;
                }
            }
            Op::GatherRows { src, index } => {
                let src = *src;
                let c = self.value(src).cols();
                if let Some(gs) = self.buf(src) {
                    for (r, &ix) in index.iter().enumerate() {
                        for (o, v) in gs[ix * c..(ix + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SliceRows { src, start } => {
                let (src, start) = (*src, *start);
                let c = self.value(src).cols();
                if let Some(gs) = self.buf(src) {
                    for (o, v) in gs[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::MeanRows(x) => {
                let x = *x;
                let rows = self.value(x).rows();
                if let Some(gx) = self.buf(x) {
                    let c = g.len();
                    for row in gx.chunks_mut(c) {
                        for (o, v) in row.iter_mut().zip(g) {
                            *o += v / rows as f64;
                        }
                    }
                }
            }
            Op::MaxRows { x, argmax } => {
                let x = *x;
                if let Some(gx) = self.buf(x) {
                    let c = g.len();
                    for (j, &r) in argmax.iter().enumerate() {
                        gx[r * c + j] += g[j];
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into(dst: Option<&mut Vec<f64>>, src: &[f64], scale: f64) {
    if let Some(d) = dst {
        for (o, v) in d.iter_mut().zip(src) {
            *o += scale * v;
        }
    }
}

fn attention_backward(
    tq: &Tensor,
    tk: &Tensor,
    tv: &Tensor,
    layout: &AttentionLayout,
    probs: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = tq.cols();
    let heads = layout.heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
    let mut dq = vec![0.0; qd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut dv = vec![0.0; vd.len()];
    let mut off = 0;
    let mut ds = Vec::new();
    for s in &layout.segments {
        let shift = s.kv_len - s.q_len.min(s.kv_len);
        for h in 0..heads {
            let block = &probs[off..off + s.q_len * s.kv_len];
            for i in 0..s.q_len {
                let visible = if layout.causal { i + shift + 1 } else { s.kv_len };
                let prow = &block[i * s.kv_len..i * s.kv_len + visible];
                let grow = &g[(s.q_start + i) * d + h * hd..][..hd];
                ds.clear();
                ds.resize(visible, 0.0);
                for j in 0..visible {
                    let vrow = &vd[(s.kv_start + j) * d + h * hd..][..hd];
                    ds[j] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    let dvrow = &mut dv[(s.kv_start + j) * d + h * hd..][..hd];
                    for (o, x) in dvrow.iter_mut().zip(grow) {
                        *o += prow[j] * x;
                    }
                }
                let dot: f64 = prow.iter().zip(&ds).map(|(p, x)| p * x).sum();
                for j in 0..visible {
                    ds[j] = prow[j] * (ds[j] - dot) * scale;
                }
                let qrow = &qd[(s.q_start + i) * d + h * hd..][..hd];
                let dqrow = &mut dq[(s.q_start + i) * d + h * hd..][..hd];
                for (j, w) in ds.iter().enumerate() {
                    let krow = &kd[(s.kv_start + j) * d + h * hd..][..hd];
                    for (o, x) in dqrow.iter_mut().zip(krow) {
                        *o += w * x;
                    }
                }
                for (j, w) in ds.iter().enumerate() {
                    let dkrow = &mut dk[(s.kv_start + j) * d + h * hd..][..hd];
                    for (o, x) in dkrow.iter_mut().zip(qrow) {
                        *o += w * x;
                    }
                }
            }
            off += s.q_len * s.kv_len;
        }
    }
    (dq, dk, dv)
}
