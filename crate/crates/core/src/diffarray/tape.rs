use std::collections::HashMap;

use super::array::gemm;
use super::{Array, ParamId, ParamStore};
use crate::error::{invalid, Error, Result};
use crate::nn::Activation;

/// Handle to a node recorded on a [`Tape`].
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
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sin(Var),
    Cos(Var),
    Tanh(Var),
    Gelu(Var),
    Sqrt(Var),
    Square(Var),
    Exp(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Outer(Var, Var),
    Sum(Var),
    Mean(Var),
    RowKron(Var, Var),
    NormalizeRows(Var, f64),
}

struct Node {
    value: Array,
    op: Op,
}

/// Wengert list of primitive operations over [`Array`]s.
///
/// Nodes are appended in evaluation order, so the list is already
/// topologically sorted and the backward sweep is a single reverse pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of a backward sweep.
pub struct Gradients {
    params: Vec<Array>,
    leaves: HashMap<usize, Array>,
}

impl Gradients {
    /// Gradient for every registered parameter, aligned with the store order.
    pub fn params(&self) -> &[Array] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Array> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> &Array {
        &self.params[id.0]
    }

    /// Gradient with respect to a leaf created by [`Tape::input`].
    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.leaves.get(&v.0)
    }
}

fn shape_err(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf treated as a constant by callers (its gradient is still computed
    /// but usually ignored).
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a registered parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let out = av.matmul(bv)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op_name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Array::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(row));
        let (m, n) = av.dims2();
        if bv.len() != n {
            return Err(shape_err("add_row", av, bv));
        }
        let mut out = av.clone();
        let b = bv.data();
        for i in 0..m {
            for (x, y) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sin);
        self.push(out, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::cos);
        self.push(out, Op::Cos(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.data().iter().any(|&x| x < 0.0) {
            return Err(invalid("sqrt of a negative value"));
        }
        let out = av.map(f64::sqrt);
        Ok(self.push(out, Op::Sqrt(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Sine => self.sin(a),
            Activation::Tanh => self.tanh(a),
            Activation::Gelu => self.gelu(a),
            Activation::Identity => a,
        }
    }

    /// Softmax along `axis` of a 1-D or 2-D array. The per-slice maximum is
    /// subtracted before exponentiation.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let nd = self.value(a).ndim();
        match (nd, axis) {
            (1, 0) | (2, 1) => Ok(self.softmax_rows(a)),
            (2, 0) => {
                let t = self.transpose(a)?;
                let s = self.softmax_rows(t);
                self.transpose(s)
            }
            _ => Err(invalid(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.value(a).shape()
            ))),
        }
    }

    fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        let mut out = av.clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() > 2 {
            return Err(invalid(format!("transpose needs a matrix, got {:?}", av.shape())));
        }
        let out = av.transpose();
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero arrays"))?;
        let rows = self.value(*first).rows();
        for p in parts {
            let pv = self.value(*p);
            if pv.ndim() > 2 || pv.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), pv));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            let c = pv.cols();
            for i in 0..rows {
                out[i * total + off..i * total + off + c].copy_from_slice(pv.row_slice(i));
            }
            off += c;
        }
        let out = Array::new(vec![rows, total], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        if start >= end || end > n {
            return Err(invalid(format!(
                "column slice {start}..{end} out of range for shape {:?}",
                av.shape()
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&av.data()[i * n + start..i * n + end]);
        }
        let out = Array::new(vec![m, w], out)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        if idx.is_empty() {
            return Err(invalid("gather of zero rows"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(invalid(format!("row index {bad} out of range for {m} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(av.row_slice(i));
        }
        let out = Array::new(vec![idx.len(), n], out)?;
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec())))
    }

    /// Outer product of the flattened operands.
    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (p, q) = (av.len(), bv.len());
        let mut out = Vec::with_capacity(p * q);
        for &x in av.data() {
            out.extend(bv.data().iter().map(|&y| x * y));
        }
        let out = Array::new(vec![p, q], out).expect("outer shape");
        self.push(out, Op::Outer(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Array::scalar(av.sum() / av.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Row-wise Kronecker product: `[N, p] x [N, q] -> [N, p*q]`, entry
    /// `(n, i*q + j) = a[n, i] * b[n, j]`.
    pub fn row_kron(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((na, p), (nb, q)) = (av.dims2(), bv.dims2());
        if na != nb {
            return Err(shape_err("row_kron", av, bv));
        }
        let mut out = Vec::with_capacity(na * p * q);
        for n in 0..na {
            let (ra, rb) = (av.row_slice(n), bv.row_slice(n));
            for &x in ra {
                out.extend(rb.iter().map(|&y| x * y));
            }
        }
        let out = Array::new(vec![na, p * q], out)?;
        Ok(self.push(out, Op::RowKron(a, b)))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        let mut out = av.clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let s = (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mu) / s);
        }
        self.push(out, Op::NormalizeRows(a, eps))
    }

    /// `sqrt(mean((pred - target)^2))`.
    pub fn rmse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.square(d);
        let m = self.mean(sq);
        self.sqrt(m)
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar node. Every parameter in `store` receives a
    /// gradient (zeros when it does not influence `loss`).
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));

        let mut params = store.zeros_like();
        let mut leaves = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    leaves.insert(i, g);
                }
                Op::Param(id) => {
                    let slot = params
                        .get_mut(id.0)
                        .ok_or_else(|| invalid("tape parameter not present in store"))?;
                    if slot.shape() != g.shape() {
                        return Err(shape_err("backward(param)", slot, &g));
                    }
                    slot.add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims2();
                    let n = bv.cols();
                    let ga = slot(&mut grads, *a, av);
                    gemm(m, n, k, g.data(), false, bv.data(), true, ga.data_mut(), true);
                    let gb = slot(&mut grads, *b, bv);
                    gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), true);
                }
                Op::Add(a, b) => {
                    slot(&mut grads, *a, y).add_assign(&g);
                    slot(&mut grads, *b, y).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    slot(&mut grads, *a, y).add_assign(&g);
                    let gb = slot(&mut grads, *b, y);
                    for (x, d) in gb.data_mut().iter_mut().zip(g.data()) {
                        *x -= d;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = slot(&mut grads, *a, av);
                    for ((x, d), o) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *x += d * o;
                    }
                    let gb = slot(&mut grads, *b, bv);
                    for ((x, d), o) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *x += d * o;
                    }
                }
                Op::AddRow(a, r) => {
                    slot(&mut grads, *a, y).add_assign(&g);
                    let rv = self.value(*r);
                    let n = rv.len();
                    let gr = slot(&mut grads, *r, rv);
                    for row in g.data().chunks(n) {
                        for (x, d) in gr.data_mut().iter_mut().zip(row) {
                            *x += d;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let ga = slot(&mut grads, *a, y);
                    for (x, d) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += c * d;
                    }
                }
                Op::Sin(a) => self.unary_back(&mut grads, *a, &g, |x, _| x.cos()),
                Op::Cos(a) => self.unary_back(&mut grads, *a, &g, |x, _| -x.sin()),
                Op::Tanh(a) => self.unary_back_y(&mut grads, *a, &g, y, |_, t| 1.0 - t * t),
                Op::Gelu(a) => self.unary_back(&mut grads, *a, &g, |x, _| gelu_grad(x)),
                Op::Sqrt(a) => self.unary_back_y(&mut grads, *a, &g, y, |_, s| {
                    if s > 0.0 {
                        0.5 / s
                    } else {
                        0.0
                    }
                }),
                Op::Square(a) => self.unary_back(&mut grads, *a, &g, |x, _| 2.0 * x),
                Op::Exp(a) => self.unary_back_y(&mut grads, *a, &g, y, |_, e| e),
                Op::SoftmaxRows(a) => {
                    let (m, n) = y.dims2();
                    let ga = slot(&mut grads, *a, y);
                    for i in 0..m {
                        let yr = &y.data()[i * n..(i + 1) * n];
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga.data_mut()[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::Transpose(a) => {
                    let av = self.value(*a);
                    let gt = g.transpose();
                    slot(&mut grads, *a, av).add_assign(&gt);
                }
                Op::Reshape(a) => {
                    let av = self.value(*a);
                    slot(&mut grads, *a, av).add_assign(&g);
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = y.dims2();
                    let mut off = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let c = pv.cols();
                        let gp = slot(&mut grads, *p, pv);
                        for r in 0..rows {
                            let src = &g.data()[r * total + off..r * total + off + c];
                            for (x, d) in gp.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *x += d;
                            }
                        }
                        off += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let n = av.cols();
                    let (m, w) = y.dims2();
                    let ga = slot(&mut grads, *a, av);
                    for r in 0..m {
                        for j in 0..w {
                            ga.data_mut()[r * n + start + j] += g.data()[r * w + j];
                        }
                    }
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let n = av.cols();
                    let ga = slot(&mut grads, *a, av);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            ga.data_mut()[src * n + j] += g.data()[r * n + j];
                        }
                    }
                }
                Op::Outer(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let q = bv.len();
                    let ga = slot(&mut grads, *a, av);
                    for (i, x) in ga.data_mut().iter_mut().enumerate() {
                        let gr = &g.data()[i * q..(i + 1) * q];
                        *x += gr.iter().zip(bv.data()).map(|(d, o)| d * o).sum::<f64>();
                    }
                    let gb = slot(&mut grads, *b, bv);
                    for (i, &ai) in av.data().iter().enumerate() {
                        let gr = &g.data()[i * q..(i + 1) * q];
                        for (x, d) in gb.data_mut().iter_mut().zip(gr) {
                            *x += ai * d;
                        }
                    }
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let d = g.item();
                    slot(&mut grads, *a, av).data_mut().iter_mut().for_each(|x| *x += d);
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let d = g.item() / av.len() as f64;
                    slot(&mut grads, *a, av).data_mut().iter_mut().for_each(|x| *x += d);
                }
                Op::RowKron(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ((nr, p), q) = (av.dims2(), bv.cols());
                    {
                        let ga = slot(&mut grads, *a, av);
                        for r in 0..nr {
                            let rb = bv.row_slice(r);
                            for i in 0..p {
                                let gr = &g.data()[r * p * q + i * q..r * p * q + (i + 1) * q];
                                ga.data_mut()[r * p + i] +=
                                    gr.iter().zip(rb).map(|(d, o)| d * o).sum::<f64>();
                            }
                        }
                    }
                    let gb = slot(&mut grads, *b, bv);
                    for r in 0..nr {
                        let ra = av.row_slice(r);
                        for (i, &ai) in ra.iter().enumerate() {
                            let gr = &g.data()[r * p * q + i * q..r * p * q + (i + 1) * q];
                            for (x, d) in gb.data_mut()[r * q..(r + 1) * q].iter_mut().zip(gr) {
                                *x += ai * d;
                            }
                        }
                    }
                }
                Op::NormalizeRows(a, eps) => {
                    let av = self.value(*a);
                    let (m, n) = av.dims2();
                    let ga = slot(&mut grads, *a, av);
                    for r in 0..m {
                        let xr = av.row_slice(r);
                        let mu = xr.iter().sum::<f64>() / n as f64;
                        let var = xr.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
                        let s = (var + eps).sqrt();
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let gm = gr.iter().sum::<f64>() / n as f64;
                        let gy = gr.iter().zip(yr).map(|(d, o)| d * o).sum::<f64>() / n as f64;
                        for j in 0..n {
                            ga.data_mut()[r * n + j] += (gr[j] - gm - yr[j] * gy) / s;
                        }
                    }
                }
            }
        }
        Ok(Gradients { params, leaves })
    }

    fn unary_back(
        &self,
        grads: &mut [Option<Array>],
        a: Var,
        g: &Array,
        df: impl Fn(f64, f64) -> f64,
    ) {
        let av = self.value(a);
        let ga = slot(grads, a, av);
        for ((x, d), &xi) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
            *x += d * df(xi, 0.0);
        }
    }

    fn unary_back_y(
        &self,
        grads: &mut [Option<Array>],
        a: Var,
        g: &Array,
        y: &Array,
        df: impl Fn(f64, f64) -> f64,
    ) {
        let av = self.value(a);
        let ga = slot(grads, a, av);
        for (((x, d), &xi), &yi) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()).zip(y.data())
        {
            *x += d * df(xi, yi);
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Array>], v: Var, like: &Array) -> &'g mut Array {
    grads[v.0].get_or_insert_with(|| Array::zeros(like.shape()))
}
