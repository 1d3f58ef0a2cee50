use std::rc::Rc;

use super::params::{Grads, ParamId, ParamStore};
use super::{elu, Tensor};
use crate::error::{shape, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Elu(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    GatherRows(Var, Rc<[usize]>),
    MeanRows(Var),
    Sum(Var),
    OuterAdd(Var, Var),
    MaskedSoftmaxRows(Var),
    LogSoftmax(Var),
    Conv1d(Var, Var, Var),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

/// A single-writer tape of tensor operations.
///
/// Parameters are read from the borrowed store, so building a graph never
/// copies weights. A graph is used for one forward pass and dropped (or
/// [`Graph::reset`]) after its backward pass.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.get(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v).require_matrix(what)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a, "matmul lhs")?;
        let (k2, m) = self.dims(b, "matmul rhs")?;
        if k != k2 {
            return shape(format!("matmul {n}x{k} by {k2}x{m}"));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape(format!("{what}: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, op))
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

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "minimum", f64::min, Op::Minimum(a, b))
    }

    /// Adds a `1 x n` row to every row of an `r x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, n) = self.dims(a, "add_row")?;
        let (one, n2) = self.dims(row, "add_row bias")?;
        if one != 1 || n != n2 {
            return shape(format!("add_row {r}x{n} with {one}x{n2}"));
        }
        let bias = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(bias).for_each(|(x, b)| *x += b);
        }
        Ok(self.push(Tensor { shape: vec![r, n], data }, Op::AddRow(a, row)))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, op)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, elu, Op::Elu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(a)))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return shape("concat needs at least one part and axis 0 or 1");
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims(p, "concat")).collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let data = if axis == 0 {
            if dims.iter().any(|&(_, c)| c != c0) {
                return shape(format!("concat rows with column counts {dims:?}"));
            }
            parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect::<Vec<_>>()
        } else {
            if dims.iter().any(|&(r, _)| r != r0) {
                return shape(format!("concat columns with row counts {dims:?}"));
            }
            let mut data = Vec::with_capacity(r0 * dims.iter().map(|d| d.1).sum::<usize>());
            for r in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            data
        };
        let shape = if axis == 0 {
            vec![dims.iter().map(|d| d.0).sum(), c0]
        } else {
            vec![r0, dims.iter().map(|d| d.1).sum()]
        };
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec(), axis)))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a, "slice")?;
        let t = self.value(a);
        let (shape, data) = match axis {
            0 if start + len <= r => (vec![len, c], t.data()[start * c..(start + len) * c].to_vec()),
            1 if start + len <= c => {
                let mut d = Vec::with_capacity(r * len);
                for i in 0..r {
                    d.extend_from_slice(&t.row(i)[start..start + len]);
                }
                (vec![r, len], d)
            }
            _ => return shape(format!("slice axis {axis} [{start}, {}) of {r}x{c}", start + len)),
        };
        let op = if axis == 0 {
            Op::GatherRows(a, (start..start + len).collect::<Vec<_>>().into())
        } else {
            Op::Slice(a, start, len)
        };
        Ok(self.push(Tensor { shape, data }, op))
    }

    /// Row selection with repetition allowed.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a, "gather_rows")?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return shape(format!("gather row {bad} of {r}"));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(t.row(i));
        }
        Ok(self.push(Tensor { shape: vec![rows.len(), c], data }, Op::GatherRows(a, rows.into())))
    }

    /// Mean over rows, giving a `1 x d` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a, "mean_rows")?;
        if r == 0 {
            return Err(Error::Domain("mean pooling over an empty set".into()));
        }
        let t = self.value(a);
        let mut data = vec![0.0; c];
        for i in 0..r {
            data.iter_mut().zip(t.row(i)).for_each(|(o, x)| *o += x);
        }
        data.iter_mut().for_each(|o| *o /= r as f64);
        Ok(self.push(Tensor { shape: vec![1, c], data }, Op::MeanRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `out[i][j] = col[i] + row[j]` for an `n x 1` column and a `1 x m` row.
    pub fn outer_add(&mut self, col: Var, row: Var) -> Result<Var> {
        let (n, one) = self.dims(col, "outer_add column")?;
        let (one2, m) = self.dims(row, "outer_add row")?;
        if one != 1 || one2 != 1 {
            return shape(format!("outer_add {n}x{one} with {one2}x{m}"));
        }
        let (cv, rv) = (self.value(col).data(), self.value(row).data());
        let mut data = Vec::with_capacity(n * m);
        for &x in cv {
            data.extend(rv.iter().map(|&y| x + y));
        }
        Ok(self.push(Tensor { shape: vec![n, m], data }, Op::OuterAdd(col, row)))
    }

    /// Row-wise softmax where `mask[i * m + j] == false` entries receive
    /// probability exactly zero. Every row needs one unmasked entry.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (n, m) = self.dims(a, "masked_softmax_rows")?;
        if mask.len() != n * m {
            return shape(format!("mask of {} for {n}x{m}", mask.len()));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = super::masked_softmax(t.row(i), &mask[i * m..(i + 1) * m])?;
            data.extend(row);
        }
        Ok(self.push(Tensor { shape: vec![n, m], data }, Op::MaskedSoftmaxRows(a)))
    }

    /// Log-softmax over every entry of `a`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Domain("log_softmax of an empty vector".into()));
        }
        let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let data = t.data().iter().map(|x| x - lse).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::LogSoftmax(a)))
    }

    /// 1-D convolution along the row axis: `x` is `L x C_in`, `kernel` is
    /// `C_out x C_in x 3`, `bias` is `1 x C_out`. Stride 1, zero padding 1.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (l, cin) = self.dims(x, "conv1d input")?;
        let ks = self.value(kernel).shape().to_vec();
        let (one, cout) = self.dims(bias, "conv1d bias")?;
        if ks.len() != 3 || ks[1] != cin || ks[2] != 3 || one != 1 || ks[0] != cout {
            return shape(format!("conv1d input {l}x{cin}, kernel {ks:?}, bias {one}x{cout}"));
        }
        if l == 0 {
            return shape("conv1d needs at least one position");
        }
        let (xv, kv, bv) = (self.value(x).data(), self.value(kernel).data(), self.value(bias).data());
        let mut data = vec![0.0; l * cout];
        for p in 0..l {
            let out = &mut data[p * cout..(p + 1) * cout];
            out.copy_from_slice(bv);
            for tap in 0..3 {
                let Some(q) = (p + tap).checked_sub(1).filter(|&q| q < l) else { continue };
                let xin = &xv[q * cin..(q + 1) * cin];
                for (o, acc) in out.iter_mut().enumerate() {
                    let krow = &kv[o * cin * 3..(o + 1) * cin * 3];
                    *acc += xin.iter().enumerate().map(|(c, &xc)| krow[c * 3 + tap] * xc).sum::<f64>();
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![l, cout], data }, Op::Conv1d(x, kernel, bias)))
    }

    /// Reverse pass from a scalar `loss`, returning parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let mut grads = Grads::zeros_like(self.store);
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Reverse pass that accumulates (sums) into `grads`.
    pub fn backward_into(&self, loss: Var, grads: &mut Grads) -> Result<()> {
        if self.value(loss).len() != 1 {
            return shape(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let out = self.value(Var(i));
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let dst = grads.0[id.index()].data_mut();
                    dst.iter_mut().zip(&g).for_each(|(d, x)| *d += x);
                }
                Op::MatMul(a, b) => {
                    let (n, k) = (self.value(*a).rows(), self.value(*a).cols());
                    let m = self.value(*b).cols();
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    // dA = G B^T, dB = A^T G
                    let mut da = vec![0.0; n * k];
                    for r in 0..n {
                        for c in 0..k {
                            let brow = &bv[c * m..(c + 1) * m];
                            da[r * k + c] = g[r * m..(r + 1) * m].iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    let mut db = vec![0.0; k * m];
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for c in 0..k {
                            let s = av[r * k + c];
                            if s != 0.0 {
                                db[c * m..(c + 1) * m].iter_mut().zip(grow).for_each(|(d, x)| *d += s * x);
                            }
                        }
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.iter().map(|x| -x).collect());
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    accumulate(&mut adj, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    accumulate(&mut adj, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga = g.iter().zip(av.iter().zip(bv)).map(|(x, (p, q))| if p <= q { *x } else { 0.0 });
                    let gb = g.iter().zip(av.iter().zip(bv)).map(|(x, (p, q))| if p <= q { 0.0 } else { *x });
                    accumulate(&mut adj, *b, gb.collect());
                    accumulate(&mut adj, *a, ga.collect());
                }
                Op::AddRow(a, row) => {
                    let n = self.value(*row).cols();
                    let mut gb = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        gb.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                    accumulate(&mut adj, *row, gb);
                    accumulate(&mut adj, *a, g);
                }
                Op::Scale(a, k) => accumulate(&mut adj, *a, g.iter().map(|x| k * x).collect()),
                Op::AddScalar(a) => accumulate(&mut adj, *a, g),
                Op::Elu(a) => {
                    let xs = self.value(*a).data();
                    let d = g.iter().zip(xs.iter().zip(out.data()));
                    accumulate(&mut adj, *a, d.map(|(g, (&x, &y))| if x > 0.0 { *g } else { g * (y + 1.0) }).collect());
                }
                Op::Tanh(a) => {
                    let d = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y));
                    accumulate(&mut adj, *a, d.collect());
                }
                Op::LeakyRelu(a, slope) => {
                    let xs = self.value(*a).data();
                    let d = g.iter().zip(xs).map(|(g, &x)| if x > 0.0 { *g } else { slope * g });
                    accumulate(&mut adj, *a, d.collect());
                }
                Op::Exp(a) => accumulate(&mut adj, *a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
                Op::Square(a) => {
                    let xs = self.value(*a).data();
                    accumulate(&mut adj, *a, g.iter().zip(xs).map(|(g, x)| 2.0 * g * x).collect());
                }
                Op::Clamp(a, lo, hi) => {
                    let xs = self.value(*a).data();
                    let d = g.iter().zip(xs).map(|(g, x)| if x < lo || x > hi { 0.0 } else { *g });
                    accumulate(&mut adj, *a, d.collect());
                }
                Op::Transpose(a) => {
                    let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = g[j * r + i];
                        }
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::Concat(parts, axis) => {
                    let total_cols = out.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = (self.value(p).rows(), self.value(p).cols());
                        let d = if *axis == 0 {
                            g[offset * total_cols..(offset + r) * total_cols].to_vec()
                        } else {
                            let mut d = Vec::with_capacity(r * c);
                            for i in 0..r {
                                d.extend_from_slice(&g[i * total_cols + offset..i * total_cols + offset + c]);
                            }
                            d
                        };
                        offset += if *axis == 0 { r } else { c };
                        accumulate(&mut adj, p, d);
                    }
                }
                Op::Slice(a, start, len) => {
                    let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::GatherRows(a, rows) => {
                    let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                    let mut d = vec![0.0; r * c];
                    for (k, &src) in rows.iter().enumerate() {
                        d[src * c..(src + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(x, y)| *x += y);
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::MeanRows(a) => {
                    let r = self.value(*a).rows();
                    let scaled: Vec<f64> = g.iter().map(|x| x / r as f64).collect();
                    accumulate(&mut adj, *a, scaled.repeat(r));
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut adj, *a, vec![g[0]; n]);
                }
                Op::OuterAdd(col, row) => {
                    let (n, m) = (out.rows(), out.cols());
                    let gc = (0..n).map(|i| g[i * m..(i + 1) * m].iter().sum()).collect();
                    let mut gr = vec![0.0; m];
                    for chunk in g.chunks(m) {
                        gr.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                    accumulate(&mut adj, *col, gc);
                    accumulate(&mut adj, *row, gr);
                }
                Op::MaskedSoftmaxRows(a) => {
                    let m = out.cols();
                    let y = out.data();
                    let mut d = vec![0.0; y.len()];
                    for i in 0..out.rows() {
                        let (ys, gs) = (&y[i * m..(i + 1) * m], &g[i * m..(i + 1) * m]);
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for j in 0..m {
                            d[i * m + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::LogSoftmax(a) => {
                    let total: f64 = g.iter().sum();
                    let d = g.iter().zip(out.data()).map(|(g, y)| g - y.exp() * total);
                    accumulate(&mut adj, *a, d.collect());
                }
                Op::Conv1d(x, kernel, bias) => {
                    let (l, cin) = (self.value(*x).rows(), self.value(*x).cols());
                    let cout = out.cols();
                    let (xv, kv) = (self.value(*x).data(), self.value(*kernel).data());
                    let mut dx = vec![0.0; l * cin];
                    let mut dk = vec![0.0; kv.len()];
                    let mut db = vec![0.0; cout];
                    for p in 0..l {
                        let gp = &g[p * cout..(p + 1) * cout];
                        db.iter_mut().zip(gp).for_each(|(d, x)| *d += x);
                        for tap in 0..3 {
                            let Some(q) = (p + tap).checked_sub(1).filter(|&q| q < l) else { continue };
                            for (o, &go) in gp.iter().enumerate() {
                                if go == 0.0 {
                                    continue;
                                }
                                for c in 0..cin {
                                    let ki = o * cin * 3 + c * 3 + tap;
                                    dk[ki] += go * xv[q * cin + c];
                                    dx[q * cin + c] += go * kv[ki];
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *kernel, dk);
                    accumulate(&mut adj, *bias, db);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            if s != 0.0 {
                orow.iter_mut().zip(&b[p * m..(p + 1) * m]).for_each(|(o, x)| *o += s * x);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::RngStream;

    fn random(rng: &mut RngStream, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| 2.0 * rng.unit() - 1.0).collect()).unwrap()
    }

    /// Central-difference check of every parameter entry against the tape.
    fn check<F>(shapes: &[&[usize]], seed: u64, tol: f64, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = RngStream::new(seed, 0);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> =
            shapes.iter().enumerate().map(|(i, s)| store.add(format!("p{i}"), random(&mut rng, s)).unwrap()).collect();
        let eval = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };
        let grads = {
            let mut g = Graph::new(&store);
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let out = f(&mut g, &vars);
            g.backward(out).unwrap()
        };
        let h = 1e-4;
        for &id in &ids {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + h;
                let up = eval(&store);
                store.get_mut(id).data_mut()[k] = orig - h;
                let down = eval(&store);
                store.get_mut(id).data_mut()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.get(id).data()[k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel <= tol, "param {} entry {k}: analytic {an} vs numeric {fd} (rel {rel})", store.name(id));
            }
        }
    }

    #[test]
    fn identity_matmul() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = Tensor::from_rows(&[vec![1.5, -2.0], vec![3.0, 4.25]]).unwrap();
        let b = g.constant(m.clone());
        let out = g.matmul(i, b).unwrap();
        assert_eq!(g.value(out), &m);
        let bad = g.constant(Tensor::zeros(&[3, 1]));
        assert!(g.matmul(i, bad).is_err());
    }

    #[test]
    fn concat_shapes() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::zeros(&[4, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[4, 8]);
        assert!(g.concat(&[a, b], 0).is_err());
        let r = g.concat(&[a, a], 0).unwrap();
        assert_eq!(g.value(r).shape(), &[8, 3]);
    }

    #[test]
    fn x_squared_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new(&store);
        let x = g.param(id);
        let y = g.square(x);
        assert_eq!(g.backward(y).unwrap().get(id).item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::zeros(&[2, 2])).unwrap();
        let mut g = Graph::new(&store);
        let x = g.param(id);
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn conv1d_identity_and_zero_kernels() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let input = Tensor::matrix(4, 1, vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let x = g.constant(input.clone());
        let k = g.constant(Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1, 1]));
        let y = g.conv1d(x, k, b).unwrap();
        assert_eq!(g.value(y), &input);
        let z = g.constant(Tensor::zeros(&[1, 1, 3]));
        let y = g.conv1d(x, z, b).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let wrong = g.constant(Tensor::zeros(&[1, 2, 3]));
        assert!(g.conv1d(x, wrong, b).is_err());
    }

    #[test]
    fn conv1d_single_position() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let k = g.constant(Tensor::new(vec![1, 2, 3], vec![9.0, 1.0, 9.0, 9.0, 10.0, 9.0]).unwrap());
        let b = g.constant(Tensor::matrix(1, 1, vec![0.5]).unwrap());
        let y = g.conv1d(x, k, b).unwrap();
        assert_eq!(g.value(y).data(), &[21.5]);
    }

    #[test]
    fn grad_sum_of_matmul() {
        check(&[&[3, 4], &[4, 2]], 1, 1e-5, |g, v| {
            let p = g.matmul(v[0], v[1]).unwrap();
            g.sum(p)
        });
    }

    #[test]
    fn grad_conv1d() {
        check(&[&[5, 3], &[2, 3, 3], &[1, 2], &[5, 2]], 2, 1e-5, |g, v| {
            let y = g.conv1d(v[0], v[1], v[2]).unwrap();
            let w = g.mul(y, v[3]).unwrap();
            g.sum(w)
        });
    }

    #[test]
    fn grad_activations() {
        check(&[&[3, 3], &[3, 3]], 3, 1e-6, |g, v| {
            let a = g.elu(v[0]);
            let b = g.tanh(v[0]);
            let ab = g.mul(a, v[1]).unwrap();
            let bb = g.mul(b, v[1]).unwrap();
            let s = g.add(ab, bb).unwrap();
            g.sum(s)
        });
    }

    #[test]
    fn grad_structural_ops() {
        check(&[&[4, 3], &[1, 3], &[3, 1], &[1, 4]], 4, 1e-5, |g, v| {
            let r = g.add_row(v[0], v[1]).unwrap();
            let t = g.transpose(r).unwrap();
            let s = g.slice(t, 1, 1, 2).unwrap();
            let gr = g.gather_rows(r, &[0, 0, 3]).unwrap();
            let mean = g.mean_rows(gr).unwrap();
            let sq = g.square(mean);
            let cat = g.concat(&[s, v[2]], 1).unwrap();
            let outer = g.outer_add(v[2], v[3]).unwrap();
            let lr = g.leaky_relu(outer, 0.2);
            let e = g.exp(lr);
            let a = g.sum(cat);
            let b = g.sum(sq);
            let c = g.mean(e);
            let ab = g.add(a, b).unwrap();
            let abc = g.sub(ab, c).unwrap();
            g.scale(abc, 1.7)
        });
    }

    #[test]
    fn grad_softmaxes_and_clipping() {
        let mask = vec![true, false, true, true, true, false, false, true, true];
        check(&[&[3, 3], &[3, 3], &[1, 5], &[1, 5]], 5, 1e-5, |g, v| {
            let p = g.masked_softmax_rows(v[0], &mask).unwrap();
            let w = g.mul(p, v[1]).unwrap();
            let ls = g.log_softmax(v[2]).unwrap();
            let lw = g.mul(ls, v[3]).unwrap();
            let cl = g.clamp(v[3], -0.3, 0.3);
            let mn = g.minimum(cl, v[2]).unwrap();
            let a = g.sum(w);
            let b = g.sum(lw);
            let c = g.sum(mn);
            let ab = g.add(a, b).unwrap();
            g.add(ab, c).unwrap()
        });
    }

    #[test]
    fn masked_rows_zero_exactly() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 50.0], vec![3.0, -2.0]]).unwrap());
        let p = g.masked_softmax_rows(x, &[true, false, false, true]).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(g.masked_softmax_rows(x, &[false, false, true, true]).is_err());
    }
}
