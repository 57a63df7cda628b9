use std::cell::Cell;
use std::sync::Arc;

use indexmap::IndexMap;

use super::kernels::{matmul, matmul_nt, matmul_tn, rows_mut, transpose};
use super::{KernelMap, Real, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static PERTURB_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: while set on the current thread, the relu backward rule is
/// scaled by 1.01 so that gradient checks can be shown to fail.
#[doc(hidden)]
pub fn set_backward_perturbation(on: bool) {
    PERTURB_BACKWARD.with(|p| p.set(on));
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var),
    RowDistance(Var, Var),
    NormalizeCols(Var, f64),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterSumRows(Var, Arc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    ReduceSum(Var),
    KernelConv(Var, Var, Arc<KernelMap>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
    name: Option<String>,
}

/// Gradients of a scalar with respect to named trainable leaves, in the
/// order the leaves were registered.
pub type Gradients<T> = IndexMap<String, Tensor<T>>;

/// Append-only record of executed ops.
///
/// Node ids increase in execution order, so reverse id order is a valid
/// reverse topological order for [`backward`](Tape::backward).
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Makes every op fail with [`Error::NonFinite`] when it produces NaN
    /// or infinity.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input with no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false, None)
    }

    /// Named leaf. Only trainable leaves receive gradients.
    pub fn param(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Var {
        self.push_raw(value, Op::Leaf, trainable, Some(name.to_string()))
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op, needs_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var], what: &'static str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(what));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad, None))
    }

    fn matrix_dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a);
        let (k2, m) = self.matrix_dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let data = matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let value = Tensor::new(vec![n, m], data)?;
        self.push(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(a);
        let value = Tensor::new(vec![m, n], transpose(self.value(a).data(), n, m))?;
        self.push(value, Op::Transpose(a), &[a], "transpose")
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    fn row_broadcast(&mut self, x: Var, r: Var, op: Op, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (n, m) = self.matrix_dims(x);
        if self.value(r).len() != m {
            return Err(Error::shape(name, self.shape(x), self.shape(r)));
        }
        let (tx, tr) = (self.value(x), self.value(r));
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(m.max(1)) {
            for (v, &b) in row.iter_mut().zip(tr.data()) {
                *v = f(*v, b);
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        self.push(value, op, &[x, r], name)
    }

    /// `x (n×m) + b` with `b` a length-`m` row added to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast(x, b, Op::AddRow(x, b), "add_row", |v, b| v + b)
    }

    /// `x (n×m) ⊙ s` with `s` a length-`m` row scaling every row.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        self.row_broadcast(x, s, Op::MulRow(x, s), "mul_row", |v, s| v * s)
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(T) -> T) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(value, op, &[a], name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let cc = T::of(c);
        self.map(a, Op::Scale(a, c), "scale", |v| v * cc)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let cc = T::of(c);
        self.map(a, Op::AddScalar(a), "add_scalar", |v| v + cc)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Abs(a), "abs", |v| v.abs())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    fn nonempty_rows(&self, a: Var, name: &'static str) -> Result<(usize, usize)> {
        let (n, m) = self.matrix_dims(a);
        if m == 0 {
            return Err(Error::InvalidArgument(format!("{name} over empty rows")));
        }
        Ok((n, m))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.nonempty_rows(a, "softmax_rows")?;
        let mut data = self.value(a).data().to_vec();
        rows_mut(&mut data, m, n * m * 8, |_, row| softmax_in_place(row));
        let value = Tensor::new(vec![n, m], data)?;
        self.push(value, Op::SoftmaxRows(a), &[a], "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.nonempty_rows(a, "log_softmax_rows")?;
        let mut data = self.value(a).data().to_vec();
        rows_mut(&mut data, m, n * m * 8, |_, row| {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        });
        let value = Tensor::new(vec![n, m], data)?;
        self.push(value, Op::LogSoftmaxRows(a), &[a], "log_softmax_rows")
    }

    /// Rows scaled to unit Euclidean norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(a);
        let mut data = self.value(a).data().to_vec();
        rows_mut(&mut data, m, n * m * 4, |_, row| {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > T::zero() {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        });
        let value = Tensor::new(vec![n, m], data)?;
        self.push(value, Op::L2NormalizeRows(a), &[a], "l2_normalize_rows")
    }

    /// Per-row Euclidean distance between `a` and `b`, shape `n×1`.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_distance", a, b)?;
        let (n, _) = self.matrix_dims(a);
        let (ta, tb) = (self.value(a), self.value(b));
        let data = (0..n)
            .map(|i| {
                ta.row(i)
                    .iter()
                    .zip(tb.row(i))
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        let value = Tensor::new(vec![n, 1], data)?;
        self.push(value, Op::RowDistance(a, b), &[a, b], "row_distance")
    }

    /// Standardizes every column over the rows: `(x - mean) / sqrt(var + eps)`.
    pub fn normalize_cols(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (n, m) = self.matrix_dims(a);
        let x = self.value(a).data();
        let (mean, inv_std) = column_stats(x, n, m, T::of(eps));
        let mut data = x.to_vec();
        for row in data.chunks_mut(m.max(1)) {
            for j in 0..m {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        self.push(value, Op::NormalizeCols(a, eps), &[a], "normalize_cols")
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (n, m) = self.matrix_dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows index {bad} out of {n} rows"
            )));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx.iter() {
            data.extend_from_slice(x.row(i));
        }
        let value = Tensor::new(vec![idx.len(), m], data)?;
        self.push(value, Op::GatherRows(a, idx), &[a], "gather_rows")
    }

    /// Row `i` of `a` is added into output row `idx[i]`.
    pub fn scatter_sum_rows(&mut self, a: Var, idx: Arc<Vec<usize>>, n_out: usize) -> Result<Var> {
        let (n, m) = self.matrix_dims(a);
        if idx.len() != n {
            return Err(Error::InvalidArgument(format!(
                "scatter_sum_rows: {} indices for {n} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::InvalidArgument(format!(
                "scatter_sum_rows index {bad} out of {n_out} rows"
            )));
        }
        let x = self.value(a);
        let mut data = vec![T::zero(); n_out * m];
        for (i, &o) in idx.iter().enumerate() {
            for (d, &v) in data[o * m..(o + 1) * m].iter_mut().zip(x.row(i)) {
                *d += v;
            }
        }
        let value = Tensor::new(vec![n_out, m], data)?;
        self.push(value, Op::ScatterSumRows(a, idx), &[a], "scatter_sum_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or(Error::InvalidArgument("concat_cols of nothing".into()))?;
        let n = self.matrix_dims(first).0;
        for &p in parts {
            if self.matrix_dims(p).0 != n {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.matrix_dims(p).1).collect();
        let m: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn reduce_sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::ReduceSum(a), &[a], "reduce_sum")
    }

    /// Discrete convolution `y[o] = Σ coeff · x[i] · W[k]` over `map`.
    pub fn kernel_conv(&mut self, x: Var, w: Var, map: Arc<KernelMap>) -> Result<Var> {
        let (n_in, c_in) = self.matrix_dims(x);
        let ws = self.shape(w);
        if ws.len() != 3 || ws[0] != map.volume() || ws[1] != c_in || n_in != map.n_in() {
            return Err(Error::shape(
                "kernel_conv",
                self.shape(x),
                self.shape(w),
            ));
        }
        let c_out = ws[2];
        let data = map.forward(self.value(x).data(), self.value(w).data(), c_in, c_out);
        let value = Tensor::new(vec![map.n_out(), c_out], data)?;
        self.push(value, Op::KernelConv(x, w, map), &[x, w], "kernel_conv")
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// trainable named leaf that the loss depends on; frozen leaves and
    /// constants are absent.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(id, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contribution.data())
                        .for_each(|(a, &c)| *a += c),
                    slot => *slot = Some(contribution),
                }
            }
        }
        let mut out = Gradients::new();
        for (id, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[id];
            if let (Some(g), Some(name), Op::Leaf) = (g, &node.name, &node.op) {
                if node.needs_grad {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }

    fn local_grads(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[id];
        let y = &node.value;
        let gd = g.data();
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v).to_vec(), data);
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.matrix_dims(*a);
                let m = self.matrix_dims(*b).1;
                if wants(*a) {
                    out.push((*a, like(*a, matmul_nt(gd, self.value(*b).data(), n, m, k))?));
                }
                if wants(*b) {
                    out.push((*b, like(*b, matmul_tn(self.value(*a).data(), gd, n, k, m))?));
                }
            }
            Op::Transpose(a) => {
                let (n, m) = self.matrix_dims(*a);
                out.push((*a, like(*a, transpose(gd, m, n))?));
            }
            Op::Add(a, b) => {
                out.push((*a, like(*a, gd.to_vec())?));
                out.push((*b, like(*b, gd.to_vec())?));
            }
            Op::Sub(a, b) => {
                out.push((*a, like(*a, gd.to_vec())?));
                out.push((*b, like(*b, gd.iter().map(|&v| -v).collect())?));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, like(*a, gd.iter().zip(xb).map(|(&g, &v)| g * v).collect())?));
                out.push((*b, like(*b, gd.iter().zip(xa).map(|(&g, &v)| g * v).collect())?));
            }
            Op::AddRow(x, b) => {
                let m = self.matrix_dims(*x).1;
                out.push((*x, like(*x, gd.to_vec())?));
                out.push((*b, like(*b, column_sums(gd, m))?));
            }
            Op::MulRow(x, s) => {
                let m = self.matrix_dims(*x).1;
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                let dx = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * sv[i % m])
                    .collect();
                let prod: Vec<T> = gd.iter().zip(xv).map(|(&g, &v)| g * v).collect();
                out.push((*x, like(*x, dx)?));
                out.push((*s, like(*s, column_sums(&prod, m))?));
            }
            Op::Scale(a, c) => {
                let c = T::of(*c);
                out.push((*a, like(*a, gd.iter().map(|&v| v * c).collect())?));
            }
            Op::AddScalar(a) => out.push((*a, like(*a, gd.to_vec())?)),
            Op::Relu(a) => {
                let bump = if PERTURB_BACKWARD.with(Cell::get) {
                    T::of(1.01)
                } else {
                    T::one()
                };
                let x = self.value(*a).data();
                let dx = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > T::zero() { g * bump } else { T::zero() })
                    .collect();
                out.push((*a, like(*a, dx)?));
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let dx = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*a, like(*a, dx)?));
            }
            Op::SoftmaxRows(a) => {
                let m = y.cols();
                let mut dx = gd.to_vec();
                let work = dx.len() * 4;
                rows_mut(&mut dx, m, work, |i, row| {
                    let yr = y.row(i);
                    let dot: T = row.iter().zip(yr).map(|(&g, &p)| g * p).sum();
                    row.iter_mut().zip(yr).for_each(|(g, &p)| *g = p * (*g - dot));
                });
                out.push((*a, like(*a, dx)?));
            }
            Op::LogSoftmaxRows(a) => {
                let m = y.cols();
                let mut dx = gd.to_vec();
                let work = dx.len() * 4;
                rows_mut(&mut dx, m, work, |i, row| {
                    let yr = y.row(i);
                    let total: T = row.iter().copied().sum();
                    row.iter_mut()
                        .zip(yr)
                        .for_each(|(g, &l)| *g = *g - l.exp() * total);
                });
                out.push((*a, like(*a, dx)?));
            }
            Op::L2NormalizeRows(a) => {
                let m = y.cols();
                let x = self.value(*a);
                let mut dx = gd.to_vec();
                let work = dx.len() * 4;
                rows_mut(&mut dx, m, work, |i, row| {
                    let norm = x.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm > T::zero() {
                        let yr = y.row(i);
                        let dot: T = row.iter().zip(yr).map(|(&g, &v)| g * v).sum();
                        row.iter_mut()
                            .zip(yr)
                            .for_each(|(g, &v)| *g = (*g - v * dot) / norm);
                    } else {
                        row.iter_mut().for_each(|g| *g = T::zero());
                    }
                });
                out.push((*a, like(*a, dx)?));
            }
            Op::RowDistance(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, m) = (ta.rows(), ta.cols());
                let mut da = Vec::with_capacity(n * m);
                for i in 0..n {
                    let d = y.data()[i];
                    let scale = if d > T::zero() { gd[i] / d } else { T::zero() };
                    da.extend(ta.row(i).iter().zip(tb.row(i)).map(|(&x, &z)| (x - z) * scale));
                }
                let db = da.iter().map(|&v| -v).collect();
                out.push((*a, like(*a, da)?));
                out.push((*b, like(*b, db)?));
            }
            Op::NormalizeCols(a, eps) => {
                let x = self.value(*a).data();
                let (n, m) = self.matrix_dims(*a);
                let (_, inv_std) = column_stats(x, n, m, T::of(*eps));
                let nn = T::of(n as f64);
                let mut mean_g = vec![T::zero(); m];
                let mut mean_gy = vec![T::zero(); m];
                for i in 0..n {
                    for j in 0..m {
                        mean_g[j] += gd[i * m + j];
                        mean_gy[j] += gd[i * m + j] * y.data()[i * m + j];
                    }
                }
                mean_g.iter_mut().for_each(|v| *v /= nn);
                mean_gy.iter_mut().for_each(|v| *v /= nn);
                let dx = (0..n * m)
                    .map(|idx| {
                        let j = idx % m;
                        inv_std[j] * (gd[idx] - mean_g[j] - y.data()[idx] * mean_gy[j])
                    })
                    .collect();
                out.push((*a, like(*a, dx)?));
            }
            Op::GatherRows(a, idx) => {
                let (n, m) = self.matrix_dims(*a);
                let mut dx = vec![T::zero(); n * m];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, &v) in dx[i * m..(i + 1) * m].iter_mut().zip(&gd[r * m..(r + 1) * m]) {
                        *d += v;
                    }
                }
                out.push((*a, like(*a, dx)?));
            }
            Op::ScatterSumRows(a, idx) => {
                let m = self.matrix_dims(*a).1;
                let mut dx = Vec::with_capacity(idx.len() * m);
                for &o in idx.iter() {
                    dx.extend_from_slice(&gd[o * m..(o + 1) * m]);
                }
                out.push((*a, like(*a, dx)?));
            }
            Op::ConcatCols(parts) => {
                let n = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.matrix_dims(p).1;
                    let mut dp = Vec::with_capacity(n * w);
                    for i in 0..n {
                        dp.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    out.push((p, like(p, dp)?));
                }
            }
            Op::ReduceSum(a) => {
                let g0 = gd[0];
                out.push((*a, Tensor::full(self.shape(*a), g0)));
            }
            Op::KernelConv(x, w, map) => {
                let c_in = self.matrix_dims(*x).1;
                let c_out = self.shape(*w)[2];
                if wants(*x) {
                    let dx = map.backward_input(gd, self.value(*w).data(), c_in, c_out);
                    out.push((*x, like(*x, dx)?));
                }
                if wants(*w) {
                    let dw = map.backward_weight(self.value(*x).data(), gd, c_in, c_out);
                    out.push((*w, like(*w, dw)?));
                }
            }
        }
        Ok(out)
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn column_sums<T: Real>(data: &[T], m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m];
    for row in data.chunks(m.max(1)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn column_stats<T: Real>(x: &[T], n: usize, m: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let nn = T::of(n.max(1) as f64);
    let mut mean = column_sums(x, m);
    mean.iter_mut().for_each(|v| *v /= nn);
    let mut var = vec![T::zero(); m];
    for row in x.chunks(m.max(1)) {
        for j in 0..m {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    let inv_std = var.into_iter().map(|v| (v / nn + eps).sqrt().recip()).collect();
    (mean, inv_std)
}
