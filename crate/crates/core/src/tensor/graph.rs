//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node whose value is computed
//! eagerly. Nodes are appended in evaluation order, so the tape is already
//! topologically sorted and [`Graph::backward`] walks it in reverse.
//!
//! Two nodes carry surrogate backward rules rather than the derivative of
//! their forward value:
//!
//! - [`Graph::straight_through`] returns a fixed (hard) value but routes its
//!   gradient to a differentiable soft input unchanged.
//! - [`Graph::ste_scale`] returns its input unchanged but, in the backward
//!   pass, behaves as the product `p[group(row)] * y[row]`.

use std::rc::Rc;

use super::element::{cast, Element};
use super::params::{ParamId, ParamStore};
use super::value::Tensor;
use crate::error::{DgeError, Result};

/// Normalization epsilon added to the variance in [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map over rows: `out[r] = Σ w · x[src]`.
///
/// Pooling (averaging a group of tokens) and un-pooling (copying one row
/// to many) are both expressed with this.
#[derive(Debug, Clone)]
pub struct RowMix<T> {
    n_in: usize,
    rows: Vec<Vec<(usize, T)>>,
}

impl<T: Element> RowMix<T> {
    pub fn new(n_in: usize, rows: Vec<Vec<(usize, T)>>) -> Result<Self> {
        for (r, row) in rows.iter().enumerate() {
            if let Some(&(src, _)) = row.iter().find(|(src, _)| *src >= n_in) {
                return Err(DgeError::Usage(format!(
                    "row mix output {r} reads row {src} of a {n_in}-row input"
                )));
            }
        }
        Ok(Self { n_in, rows })
    }

    /// One output row per group, each the arithmetic mean of its members.
    pub fn mean_of(n_in: usize, groups: &[Vec<usize>]) -> Result<Self> {
        let rows = groups
            .iter()
            .map(|g| {
                let w = cast::<T>(1.0 / g.len() as f64);
                g.iter().map(|&src| (src, w)).collect()
            })
            .collect();
        Self::new(n_in, rows)
    }

    /// `n_out` output rows; every member of `groups[j]` receives input row `j`.
    /// Rows claimed by no group are zero.
    pub fn broadcast(n_out: usize, groups: &[Vec<usize>]) -> Result<Self> {
        let mut rows = vec![Vec::new(); n_out];
        for (j, g) in groups.iter().enumerate() {
            for &dst in g {
                let slot = rows.get_mut(dst).ok_or_else(|| {
                    DgeError::Usage(format!("broadcast target {dst} outside {n_out} rows"))
                })?;
                if !slot.is_empty() {
                    return Err(DgeError::Invariant(format!(
                        "output row {dst} claimed by more than one group"
                    )));
                }
                slot.push((j, T::one()));
            }
        }
        Self::new(groups.len(), rows)
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, T)>] {
        &self.rows
    }

    pub fn entries(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, outer: usize, dim: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    RowMix(Var, Rc<RowMix<T>>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Pick(Var, Vec<usize>),
    CrossEntropy { logits: Var, label: usize, probs: Vec<T> },
    StraightThrough(Var),
    SteScale { y: Var, p: Var, row_group: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zeros when the node received none.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Recording tape of tensor operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(Var, ParamId)>,
    macs: u64,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols<T: Element>(t: &Tensor<T>) -> (usize, usize) {
    let cols = *t.shape().last().expect("non-empty shape");
    (t.numel() / cols, cols)
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> DgeError {
    DgeError::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by matrix products and row mixes so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Trainable parameter; its gradient can be collected with
    /// [`ParamStore::accumulate`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.variable(store.value(id).clone());
        self.bindings.push((v, id));
        v
    }

    pub(crate) fn bindings(&self) -> &[(Var, ParamId)] {
        &self.bindings
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `x[r, c] + b[c]` for every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, cols) = rows_cols(tx);
        if tb.numel() != cols {
            return Err(mismatch("add_row", tx.shape(), tb.shape()));
        }
        let bias = tb.data();
        let data = tx
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &b)| v + b))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(t, Op::AddScalar(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = match ta.shape() {
            [m, k] => (*m, *k),
            s => return Err(mismatch("matmul", s, tb.shape())),
        };
        let n = match tb.shape() {
            [k2, n] if *k2 == k => *n,
            s => return Err(mismatch("matmul", ta.shape(), s)),
        };
        let mut out = vec![T::zero(); m * n];
        // SAFETY: extents and strides describe the row-major buffers above.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                ta.data().as_ptr(),
                k as isize,
                1,
                tb.data().as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        self.macs += (m * k * n) as u64;
        let t = Tensor::new([m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = match tx.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(DgeError::Shape {
                    shape: s.to_vec(),
                    detail: "transpose expects a matrix".into(),
                })
            }
        };
        let src = tx.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new([c, r], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(DgeError::Usage(format!("softmax axis {axis} for shape {shape:?}")));
        }
        if let Some(bad) = tx.data().iter().find(|v| !v.is_finite()) {
            return Err(DgeError::numeric("softmax", format!("non-finite input {bad:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = tx.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| o * dim * inner + d * inner + i;
                let max = (0..dim).map(|d| src[at(d)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for d in 0..dim {
                    let e = (src[at(d)] - max).exp();
                    out[at(d)] = e;
                    total = total + e;
                }
                for d in 0..dim {
                    out[at(d)] = out[at(d)] / total;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, outer, dim, inner }, rg))
    }

    /// Per-row normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = rows_cols(tx);
        if tg.numel() != cols || tb.numel() != cols {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let eps = cast::<T>(LAYER_NORM_EPS);
        let n = cast::<T>(cols as f64);
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * tg.data()[c] + tb.data()[c]);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_fwd);
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.data().iter().copied().sum::<T>() / cast::<T>(tx.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn row_mix(&mut self, x: Var, mix: Rc<RowMix<T>>) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = rows_cols(tx);
        if rows != mix.n_in() || tx.shape().len() != 2 {
            return Err(mismatch("row_mix", tx.shape(), &[mix.n_in(), cols]));
        }
        let mut out = vec![T::zero(); mix.n_out() * cols];
        for (r, entries) in mix.rows().iter().enumerate() {
            let dst = &mut out[r * cols..(r + 1) * cols];
            for &(src, w) in entries {
                for (d, &s) in dst.iter_mut().zip(tx.row(src)) {
                    *d = *d + w * s;
                }
            }
        }
        self.macs += (mix.entries() * cols) as u64;
        let t = Tensor::new([mix.n_out(), cols], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::RowMix(x, mix), rg))
    }

    /// `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = rows_cols(tx);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(DgeError::Usage(format!("gather row {bad} of {rows}")));
        }
        let data = idx.iter().flat_map(|&i| tx.row(i).iter().copied()).collect();
        let t = Tensor::new([idx.len(), cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// `out[idx[i]] += x[i]` into `n_out` zero rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = rows_cols(tx);
        if idx.len() != rows {
            return Err(mismatch("scatter_add_rows", tx.shape(), &[idx.len(), cols]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(DgeError::Usage(format!("scatter row {bad} into {n_out}")));
        }
        let mut out = vec![T::zero(); n_out * cols];
        for (i, &dst) in idx.iter().enumerate() {
            for (d, &s) in out[dst * cols..(dst + 1) * cols].iter_mut().zip(tx.row(i)) {
                *d = *d + s;
            }
        }
        let t = Tensor::new([n_out, cols], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::ScatterAddRows(x, idx.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| DgeError::Usage("concat of zero tensors".into()))?;
        let (_, cols) = rows_cols(self.value(first));
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            let (r, c) = rows_cols(tp);
            if c != cols {
                return Err(mismatch("concat_rows", self.value(first).shape(), tp.shape()));
            }
            rows += r;
            data.extend_from_slice(tp.data());
        }
        let t = Tensor::new([rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = rows_cols(tx);
        if len == 0 || start + len > rows {
            return Err(DgeError::Usage(format!("rows {start}..{} of {rows}", start + len)));
        }
        let t = Tensor::new([len, cols], tx.data()[start * cols..(start + len) * cols].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| DgeError::Usage("concat of zero tensors".into()))?;
        let (rows, _) = rows_cols(self.value(first));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.value(p));
            if r != rows {
                return Err(mismatch("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new([rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = rows_cols(tx);
        if len == 0 || start + len > cols {
            return Err(DgeError::Usage(format!("cols {start}..{} of {cols}", start + len)));
        }
        let data = (0..rows)
            .flat_map(|r| tx.row(r)[start..start + len].iter().copied())
            .collect();
        let t = Tensor::new([rows, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    /// `out[r] = x[r, idx[r]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = rows_cols(tx);
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return Err(mismatch("pick", tx.shape(), &[idx.len()]));
        }
        let data = idx.iter().enumerate().map(|(r, &i)| tx.row(r)[i]).collect();
        let t = Tensor::new([rows], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Pick(x, idx.to_vec()), rg))
    }

    /// Negative log-likelihood of `label` under softmax of a logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let tl = self.value(logits);
        let k = tl.numel();
        if label >= k {
            return Err(DgeError::Usage(format!("label {label} with {k} classes")));
        }
        if !tl.all_finite() {
            return Err(DgeError::numeric("cross_entropy", "non-finite logits"));
        }
        let max = tl.data().iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = tl.data().iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let loss = total.ln() + max - tl.data()[label];
        let probs = exps.iter().map(|&e| e / total).collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label, probs }, rg))
    }

    /// Forward value `hard`; backward passes the incoming gradient to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<T>) -> Result<Var> {
        if self.shape(soft) != hard.shape() {
            return Err(mismatch("straight_through", self.shape(soft), hard.shape()));
        }
        let rg = self.rg(&[soft]);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    /// Identity forward; backward acts as `p[row_group[r]] * y[r]`.
    pub fn ste_scale(&mut self, y: Var, p: Var, row_group: &[usize]) -> Result<Var> {
        let (ty, tp) = (self.value(y), self.value(p));
        let (rows, _) = rows_cols(ty);
        if row_group.len() != rows || row_group.iter().any(|&g| g >= tp.numel()) {
            return Err(mismatch("ste_scale", ty.shape(), tp.shape()));
        }
        let t = ty.clone();
        let rg = self.rg(&[y, p]);
        Ok(self.push(t, Op::SteScale { y, p, row_group: row_group.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(DgeError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }

    fn backprop(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.slot(grads, v) {
                        axpy(ga, g, T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, T::one());
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gi), &bi) in ga.iter_mut().zip(g).zip(vb) {
                        *d = *d + gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, &gi), &ai) in gb.iter_mut().zip(g).zip(va) {
                        *d = *d + gi * ai;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, g, T::one());
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let cols = gb.len();
                    for row in g.chunks(cols) {
                        axpy(gb, row, T::one());
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, g, *s);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, g, T::one());
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    // ga[m×k] += g[m×n] · bᵀ
                    unsafe {
                        T::gemm(
                            m,
                            n,
                            k,
                            g.as_ptr(),
                            n as isize,
                            1,
                            tb.data().as_ptr(),
                            1,
                            n as isize,
                            T::one(),
                            ga.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // gb[k×n] += aᵀ · g
                    unsafe {
                        T::gemm(
                            k,
                            m,
                            n,
                            ta.data().as_ptr(),
                            1,
                            k as isize,
                            g.as_ptr(),
                            n as isize,
                            1,
                            T::one(),
                            gb.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[1], node.value.shape()[0]);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax { x, outer, dim, inner } => {
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |d: usize| o * dim * inner + d * inner + i;
                            let dot = (0..*dim).map(|d| g[at(d)] * y[at(d)]).sum::<T>();
                            for d in 0..*dim {
                                let j = at(d);
                                gx[j] = gx[j] + y[j] * (g[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = self.value(*gain).numel();
                let gain_v = self.value(*gain).data();
                if let Some(gx) = self.slot(grads, *x) {
                    let n = cast::<T>(cols as f64);
                    for (r, (grow, hrow)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let dh: Vec<T> = grow.iter().zip(gain_v).map(|(&gi, &w)| gi * w).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(&a, &h)| a * h).sum::<T>() / n;
                        for c in 0..cols {
                            let j = r * cols + c;
                            gx[j] = gx[j] + rstd[r] * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] = gg[c] + grow[c] * hrow[c];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for grow in g.chunks(cols) {
                        axpy(gb, grow, T::one());
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *d = *d + gi * gelu_grad(v);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for d in gx.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] / cast::<T>(gx.len() as f64);
                    for d in gx.iter_mut() {
                        *d = *d + s;
                    }
                }
            }
            Op::RowMix(x, mix) => {
                let cols = *node.value.shape().last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, entries) in mix.rows().iter().enumerate() {
                        let grow = &g[r * cols..(r + 1) * cols];
                        for &(src, w) in entries {
                            axpy(&mut gx[src * cols..(src + 1) * cols], grow, w);
                        }
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let cols = *node.value.shape().last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &src) in idx.iter().enumerate() {
                        axpy(&mut gx[src * cols..(src + 1) * cols], &g[i * cols..(i + 1) * cols], T::one());
                    }
                }
            }
            Op::ScatterAddRows(x, idx) => {
                let cols = *node.value.shape().last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &dst) in idx.iter().enumerate() {
                        axpy(&mut gx[i * cols..(i + 1) * cols], &g[dst * cols..(dst + 1) * cols], T::one());
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = self.slot(grads, p) {
                        axpy(gp, &g[offset..offset + n], T::one());
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = *node.value.shape().last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    let off = start * cols;
                    axpy(&mut gx[off..off + g.len()], g, T::one());
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let cols = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = *self.value(p).shape().last().unwrap();
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * cols + offset..r * cols + offset + w];
                            axpy(&mut gp[r * w..(r + 1) * w], src, T::one());
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, w) = (node.value.shape()[0], node.value.shape()[1]);
                let cols = *self.value(*x).shape().last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let dst = &mut gx[r * cols + start..r * cols + start + w];
                        axpy(dst, &g[r * w..(r + 1) * w], T::one());
                    }
                }
            }
            Op::Pick(x, idx) => {
                let cols = *self.value(*x).shape().last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[r * cols + i] = gx[r * cols + i] + g[r];
                    }
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    for (k, (d, &p)) in gl.iter_mut().zip(probs).enumerate() {
                        let target = if k == *label { T::one() } else { T::zero() };
                        *d = *d + g[0] * (p - target);
                    }
                }
            }
            Op::StraightThrough(soft) => {
                if let Some(gs) = self.slot(grads, *soft) {
                    axpy(gs, g, T::one());
                }
            }
            Op::SteScale { y, p, row_group } => {
                let cols = *node.value.shape().last().unwrap();
                let pv = self.value(*p).data().to_vec();
                let yv = self.value(*y).data();
                if let Some(gp) = self.slot(grads, *p) {
                    for (r, &grp) in row_group.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let dot = g[span.clone()].iter().zip(&yv[span]).map(|(&a, &b)| a * b).sum::<T>();
                        gp[grp] = gp[grp] + dot;
                    }
                }
                if let Some(gy) = self.slot(grads, *y) {
                    for (r, &grp) in row_group.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        axpy(&mut gy[span.clone()], &g[span], pv[grp]);
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Element>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu_fwd<T: Element>(x: T) -> T {
    let a = cast::<T>((2.0 / std::f64::consts::PI).sqrt());
    let half = cast::<T>(0.5);
    half * x * (T::one() + (a * (x + cast::<T>(GELU_C) * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let a = cast::<T>((2.0 / std::f64::consts::PI).sqrt());
    let half = cast::<T>(0.5);
    let c = cast::<T>(GELU_C);
    let t = (a * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * a * (T::one() + cast::<T>(3.0) * c * x * x)
}
