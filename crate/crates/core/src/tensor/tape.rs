use super::real::{gemm, MatView, Real};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a grouped multi-head attention: `groups` independent sequences,
/// each with `q_rows` queries attending over `kv_rows` keys/values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub groups: usize,
    pub q_rows: usize,
    pub kv_rows: usize,
    pub heads: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        /// `[groups, heads, q_rows, kv_rows]`
        probs: Tensor<T>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    GroupMean {
        x: Var,
        group: usize,
    },
    Sum(Var),
    SmoothL1 {
        pred: Var,
        target: Vec<T>,
        beta: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`] for every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Records primitive operations in execution order for one forward/backward pair.
///
/// Node inputs always precede the node itself, so reverse index order is a
/// valid topological order for the backward sweep.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// In-place numerically stable softmax over each `cols`-wide row.
pub(crate) fn softmax_rows<T: Real>(buf: &mut [T], cols: usize) {
    for row in buf.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Attention probabilities `[groups, heads, q_rows, kv_rows]` cached by an
    /// [`attention`](Self::attention) node.
    pub fn attention_probs(&self, v: Var) -> Option<&Tensor<T>> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are produced iff `value.requires_grad()`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::matmul_values(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x + bias` with `bias` broadcast over every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let cols = xv.cols();
        if bv.numel() != cols {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} vs rows of width {cols}", bv.shape()),
            ));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_bias(xw, bias)
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} vs width {d}",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let dn = T::from_count(d);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            for j in 0..d {
                out.push((row[j] - mu) * rs * g[j] + b[j]);
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        softmax_rows(&mut data, cols);
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q` is `[groups*q_rows, D]`, `k` and `v` are `[groups*kv_rows, D]`. Each
    /// head reads a contiguous `D/heads` column slice; outputs are written back
    /// to the same slice, so the result is the head concatenation.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let AttentionShape {
            groups,
            q_rows,
            kv_rows,
            heads,
        } = shape;
        let (qr, d_model) = self.dims2(q, "attention")?;
        let (kr, kd) = self.dims2(k, "attention")?;
        let (vr, vd) = self.dims2(v, "attention")?;
        if kv_rows == 0 || q_rows == 0 || groups == 0 {
            return Err(Error::Contract("attention over an empty sequence".into()));
        }
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d_model} not divisible by {heads} heads"),
            ));
        }
        if qr != groups * q_rows || kr != groups * kv_rows || vr != kr || kd != d_model || vd != d_model {
            return Err(Error::shape(
                "attention",
                format!("q {qr}x{d_model}, k {kr}x{kd}, v {vr}x{vd} for {shape:?}"),
            ));
        }
        let hd = d_model / heads;
        let scale = T::one() / T::from_count(hd).sqrt();
        let qd = self.value(q).data();
        let kd_ = self.value(k).data();
        let vd_ = self.value(v).data();
        let block = q_rows * kv_rows;
        let mut probs = vec![T::zero(); groups * heads * block];
        let mut out = vec![T::zero(); qr * d_model];
        for g in 0..groups {
            for h in 0..heads {
                let p_off = (g * heads + h) * block;
                let qv = MatView::sub(g * q_rows * d_model + h * hd, q_rows, hd, d_model);
                let kv = MatView::sub(g * kv_rows * d_model + h * hd, kv_rows, hd, d_model);
                let pv = MatView::sub(p_off, q_rows, kv_rows, kv_rows);
                gemm(scale, qd, qv, kd_, kv.t(), T::zero(), &mut probs, pv);
                softmax_rows(&mut probs[p_off..p_off + block], kv_rows);
                let ov = MatView::sub(g * q_rows * d_model + h * hd, q_rows, hd, d_model);
                gemm(T::one(), &probs, pv, vd_, kv, T::zero(), &mut out, ov);
            }
        }
        let value = Tensor::new(vec![qr, d_model], out)?;
        let probs = Tensor::new(vec![groups, heads, q_rows, kv_rows], probs)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Row `i` of the result is row `index[i]` of `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "gather_rows")?;
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            data.extend_from_slice(xv.row(i));
        }
        let value = Tensor::new(vec![index.len(), cols], data)?;
        Ok(self.push(value, Op::GatherRows { x, index }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let (_, cols) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("widths {cols} and {c} differ"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Means of consecutive blocks of `group` rows: `[G*group, C] -> [G, C]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "group_mean")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape(
                "group_mean",
                format!("{rows} rows not divisible into groups of {group}"),
            ));
        }
        let xv = self.value(x);
        let inv = T::one() / T::from_count(group);
        let mut data = vec![T::zero(); rows / group * cols];
        for r in 0..rows {
            let dst = &mut data[(r / group) * cols..(r / group + 1) * cols];
            for (d, &s) in dst.iter_mut().zip(xv.row(r)) {
                *d += s;
            }
        }
        for d in &mut data {
            *d *= inv;
        }
        let value = Tensor::new(vec![rows / group, cols], data)?;
        Ok(self.push(value, Op::GroupMean { x, group }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean smooth-L1 loss of `pred` (any shape, `target.len()` elements).
    pub fn smooth_l1(&mut self, pred: Var, target: &[T], beta: T) -> Result<Var> {
        if beta <= T::zero() {
            return Err(Error::Contract("smooth_l1 beta must be positive".into()));
        }
        let pv = self.value(pred);
        if pv.numel() != target.len() {
            return Err(Error::shape(
                "smooth_l1",
                format!("{} predictions vs {} targets", pv.numel(), target.len()),
            ));
        }
        let n = T::from_count(target.len());
        let total = pv
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| smooth_l1_value(p - t, beta))
            .sum::<T>();
        let value = Tensor::scalar(total / n);
        Ok(self.push(
            value,
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                beta,
            },
            &[pred],
        ))
    }

    /// Reverse sweep from the scalar `loss`; clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        self.nodes.clear();
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            let node = &nodes[v.0];
            if node.needs_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
                f(slot);
            }
        };
        let val = |v: Var| &nodes[v.0].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                acc(grads, *a, &mut |da| {
                    gemm(
                        T::one(),
                        g,
                        MatView::dense(m, n),
                        val(*b).data(),
                        MatView::dense(k, n).t(),
                        T::one(),
                        da,
                        MatView::dense(m, k),
                    )
                });
                acc(grads, *b, &mut |db| {
                    gemm(
                        T::one(),
                        val(*a).data(),
                        MatView::dense(m, k).t(),
                        g,
                        MatView::dense(m, n),
                        T::one(),
                        db,
                        MatView::dense(k, n),
                    )
                });
            }
            Op::AddBias(x, b) => {
                acc(grads, *x, &mut |dx| add_into(dx, g));
                let cols = val(*b).numel();
                acc(grads, *b, &mut |db| {
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, &mut |da| add_into(da, g));
                acc(grads, *b, &mut |db| add_into(db, g));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, &mut |da| {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(val(*b).data()) {
                        *d += gi * bi;
                    }
                });
                acc(grads, *b, &mut |db| {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(val(*a).data()) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(grads, *x, &mut |dx| {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * *c;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = val(*x);
                let d = xv.cols();
                let dn = T::from_count(d);
                let gd = val(*gain).data();
                let xhat = |r: usize, j: usize| (xv.data()[r * d + j] - mean[r]) * rstd[r];
                acc(grads, *gain, &mut |dg| {
                    for (r, row) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            dg[j] += row[j] * xhat(r, j);
                        }
                    }
                });
                acc(grads, *bias, &mut |db| {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                });
                acc(grads, *x, &mut |dx| {
                    let mut dxhat = vec![T::zero(); d];
                    for (r, row) in g.chunks(d).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = row[j] * gd[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat(r, j);
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat(r, j) * m2);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                acc(grads, *x, &mut |dx| {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(val(*x).data()) {
                        *d += gi * gelu_grad_scalar(xi);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &nodes[i].value;
                let cols = y.cols();
                acc(grads, *x, &mut |dx| {
                    for ((drow, grow), yrow) in dx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(y.data().chunks(cols))
                    {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => self.attention_backward(*q, *k, *v, *shape, probs, g, grads),
            Op::GatherRows { x, index } => {
                let cols = val(*x).cols();
                acc(grads, *x, &mut |dx| {
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut dx[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(grads, p, &mut |dp| add_into(dp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::GroupMean { x, group } => {
                let cols = val(*x).cols();
                let inv = T::one() / T::from_count(*group);
                acc(grads, *x, &mut |dx| {
                    for (r, drow) in dx.chunks_mut(cols).enumerate() {
                        let src = &g[(r / group) * cols..(r / group + 1) * cols];
                        for (d, &s) in drow.iter_mut().zip(src) {
                            *d += s * inv;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(grads, *x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::SmoothL1 { pred, target, beta } => {
                let n = T::from_count(target.len());
                acc(grads, *pred, &mut |dp| {
                    for ((d, &p), &t) in dp.iter_mut().zip(val(*pred).data()).zip(target) {
                        *d += g[0] * smooth_l1_grad(p - t, *beta) / n;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: &Tensor<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let AttentionShape {
            groups,
            q_rows,
            kv_rows,
            heads,
        } = shape;
        let nodes = &self.nodes;
        let d_model = nodes[q.0].value.cols();
        let hd = d_model / heads;
        let scale = T::one() / T::from_count(hd).sqrt();
        let block = q_rows * kv_rows;
        let p = probs.data();
        let qd = nodes[q.0].value.data();
        let kd = nodes[k.0].value.data();
        let vd = nodes[v.0].value.data();
        let mut dp = vec![T::zero(); block];

        let ensure = |v: Var, grads: &mut [Option<Vec<T>>]| {
            if nodes[v.0].needs_grad && grads[v.0].is_none() {
                grads[v.0] = Some(vec![T::zero(); nodes[v.0].value.numel()]);
            }
        };
        ensure(q, grads);
        ensure(k, grads);
        ensure(v, grads);

        for gi in 0..groups {
            for h in 0..heads {
                let p_off = (gi * heads + h) * block;
                let pv = MatView::sub(p_off, q_rows, kv_rows, kv_rows);
                let ov = MatView::sub(gi * q_rows * d_model + h * hd, q_rows, hd, d_model);
                let kvv = MatView::sub(gi * kv_rows * d_model + h * hd, kv_rows, hd, d_model);
                let local = MatView::dense(q_rows, kv_rows);

                // dV += P^T dO
                if let Some(dv) = grads[v.0].as_mut() {
                    gemm(T::one(), p, pv.t(), g, ov, T::one(), dv, kvv);
                }
                // dP = dO V^T, then dS = P ⊙ (dP - rowsum(dP ⊙ P))
                gemm(T::one(), g, ov, vd, kvv.t(), T::zero(), &mut dp, local);
                for r in 0..q_rows {
                    let prow = &p[p_off + r * kv_rows..p_off + (r + 1) * kv_rows];
                    let drow = &mut dp[r * kv_rows..(r + 1) * kv_rows];
                    let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    for (d, &pi) in drow.iter_mut().zip(prow) {
                        *d = pi * (*d - dot);
                    }
                }
                if let Some(dq) = grads[q.0].as_mut() {
                    gemm(scale, &dp, local, kd, kvv, T::one(), dq, ov);
                }
                if let Some(dk) = grads[k.0].as_mut() {
                    gemm(scale, &dp, local.t(), qd, ov, T::one(), dk, kvv);
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn smooth_l1_value<T: Real>(diff: T, beta: T) -> T {
    let a = diff.abs();
    if a < beta {
        T::lit(0.5) * a * a / beta
    } else {
        a - T::lit(0.5) * beta
    }
}

fn smooth_l1_grad<T: Real>(diff: T, beta: T) -> T {
    if diff.abs() < beta {
        diff / beta
    } else {
        diff.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[2f64.ln(), 0.0]));
        let y = tape.softmax(x);
        assert!((tape.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);

        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let one = tape.constant(t(&[3], &[1.0; 3]));
        let zero = tape.constant(t(&[3], &[0.0; 3]));
        let x = tape.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        let y = tape.layer_norm(x, one, zero, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let one = tape.constant(t(&[2], &[1.0; 2]));
        let zero = tape.constant(t(&[2], &[0.0; 2]));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, one, zero, 1e-12).unwrap();
        let yv = tape.value(y).data();
        assert!((yv[0] + 1.0).abs() < 1e-10 && (yv[1] - 1.0).abs() < 1e-10);

        assert!(tape.layer_norm(x, one, zero, 0.0).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-6);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.3, -1.0, 2.0]).with_requires_grad(true));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(tape.is_empty());

        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let y = tape.leaf(t(&[2], &[5.0, 6.0]).with_requires_grad(true));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.leaf(t(&[2], &[3.0, 4.0]).with_requires_grad(true));
        let p = tape.mul(x, w).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1_value(0.0f64, 1.0), 0.0);
        assert_eq!(smooth_l1_value(0.5f64, 1.0), 0.125);
        assert_eq!(smooth_l1_value(-2.0f64, 1.0), 1.5);
    }

    #[test]
    fn attention_rejects_bad_layout() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::<f64>::zeros([4, 6]));
        let shape = AttentionShape {
            groups: 2,
            q_rows: 2,
            kv_rows: 2,
            heads: 4,
        };
        assert!(tape.attention(q, q, q, shape).is_err());
        let shape = AttentionShape { heads: 3, ..shape };
        assert!(tape.attention(q, q, q, shape).is_ok());
    }
}
