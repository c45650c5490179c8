//! Reverse-mode automatic differentiation over matrix-valued primitives.
//!
//! A [`Tape`] records every primitive in evaluation order. Values are
//! computed eagerly when an operation is pushed; [`Tape::backward`] walks the
//! nodes in reverse and accumulates adjoints. Trainable parameters enter the
//! tape through [`Tape::param`] and are the only nodes whose adjoints are
//! reported back to a [`ParamStore`]. Frozen weights enter either as plain
//! constants or through [`Tape::linear_const`], which never materialises an
//! adjoint for the weight.

use std::rc::Rc;
use std::sync::Arc;

use super::{softplus_unchecked, Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    LinearConst(Var, Arc<Matrix>),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Softplus(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { input: Var, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { input: Var, start: usize },
    MeanRows(Var),
    BroadcastRows(Var),
    SumAll(Var),
    Entry { input: Var, row: usize, col: usize },
    RowMatVec(Var, Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn same_shape(context: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            context,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf for a registered parameter. Repeated calls return the same node so
    /// all uses of a parameter share one adjoint.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let idx = id.index();
        if self.param_vars.len() <= idx {
            self.param_vars.resize(idx + 1, None);
        }
        if let Some(v) = self.param_vars[idx] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.param_vars[idx] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(value, Op::MatMulNT(a, b)))
    }

    /// `a · Wᵀ` for a frozen weight `W`; no adjoint is kept for `W`.
    pub fn linear_const(&mut self, a: Var, weight: &Arc<Matrix>) -> Result<Var> {
        let value = self.value(a).matmul_nt(weight)?;
        Ok(self.push(value, Op::LinearConst(a, Arc::clone(weight))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(row));
        if bm.rows() != 1 || bm.cols() != am.cols() {
            return Err(Error::dim(
                "add_row",
                format!("(1, {})", am.cols()),
                format!("{:?}", bm.shape()),
            ));
        }
        let mut value = am.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(bm.as_slice()) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus_unchecked);
        self.push(value, Op::Softplus(a))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).as_slice().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("log of nonpositive value {bad}")));
        }
        let value = self.value(a).map(f64::ln);
        Ok(self.push(value, Op::Log(a)))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Row-wise softmax where columns flagged `false` in `valid` get exactly
    /// zero weight (the `−∞` logit convention). At least one column must be valid.
    pub fn masked_softmax_rows(&mut self, a: Var, valid: &Rc<[bool]>) -> Result<Var> {
        let input = self.value(a);
        if valid.len() != input.cols() {
            return Err(Error::dim("masked_softmax_rows", input.cols(), valid.len()));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Context("every attention position is masked".into()));
        }
        let mut value = input.clone();
        for r in 0..value.rows() {
            masked_softmax_in_place(value.row_mut(r), valid);
        }
        // Masked entries are exact zeros, so the plain softmax adjoint applies.
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Row-wise standardisation `(x − mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        let n = value.cols() as f64;
        let mut inv_std = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(value, Op::LayerNormRows { input: a, inv_std })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(Error::dim("concat_cols", rows, m.rows()));
            }
            cols += m.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Matrix::from_raw(rows, cols, data), Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.value(a);
        if start + len > m.cols() {
            return Err(Error::dim("slice_cols", m.cols(), start + len));
        }
        let mut data = Vec::with_capacity(m.rows() * len);
        for r in 0..m.rows() {
            data.extend_from_slice(&m.row(r)[start..start + len]);
        }
        let value = Matrix::from_raw(m.rows(), len, data);
        Ok(self.push(value, Op::SliceCols { input: a, start }))
    }

    /// Column means, `1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = vec![0.0; m.cols()];
        for r in 0..m.rows() {
            for (o, x) in out.iter_mut().zip(m.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / m.rows() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Matrix::row_vector(out), Op::MeanRows(a))
    }

    /// Repeats a `1 × n` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let m = self.value(a);
        if m.rows() != 1 {
            return Err(Error::dim("broadcast_rows", 1, m.rows()));
        }
        let data = m.as_slice().repeat(rows);
        let value = Matrix::from_raw(rows, m.cols(), data);
        Ok(self.push(value, Op::BroadcastRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::scalar(s), Op::SumAll(a))
    }

    pub fn entry(&mut self, a: Var, row: usize, col: usize) -> Result<Var> {
        let m = self.value(a);
        if row >= m.rows() || col >= m.cols() {
            return Err(Error::dim("entry", format!("{:?}", m.shape()), format!("({row}, {col})")));
        }
        let v = m.get(row, col);
        Ok(self.push(Matrix::scalar(v), Op::Entry { input: a, row, col }))
    }

    /// Batched matrix–vector product. Row `t` of `e` holds a row-major `r × r`
    /// matrix `E_t`; row `t` of `z` holds `z_t`. Output row `t` is `E_t z_t`.
    pub fn row_matvec(&mut self, e: Var, z: Var) -> Result<Var> {
        let (em, zm) = (self.value(e), self.value(z));
        let r = zm.cols();
        if em.rows() != zm.rows() || em.cols() != r * r {
            return Err(Error::dim(
                "row_matvec",
                format!("({}, {})", zm.rows(), r * r),
                format!("{:?}", em.shape()),
            ));
        }
        let t_len = zm.rows();
        let mut out = vec![0.0; t_len * r];
        for t in 0..t_len {
            let et = em.row(t);
            let zt = zm.row(t);
            for i in 0..r {
                out[t * r + i] = super::matrix::dot(&et[i * r..(i + 1) * r], zt);
            }
        }
        Ok(self.push(Matrix::from_raw(t_len, r, out), Op::RowMatVec(e, z)))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let m = self.value(a);
        if m.len() != rows * cols {
            return Err(Error::dim("reshape", m.len(), rows * cols));
        }
        let value = Matrix::from_raw(rows, cols, m.as_slice().to_vec());
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Reverse pass from a scalar node with unit seed.
    pub fn backward(&self, loss: Var) -> Adjoints {
        self.backward_seeded(loss, 1.0)
    }

    /// Reverse pass from a `1 × 1` node seeded with `seed` (e.g. `-1.0` to
    /// differentiate the negative of the recorded objective).
    pub fn backward_seeded(&self, loss: Var, seed: f64) -> Adjoints {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar node");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(seed));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Adjoints { grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let acc = |grads: &mut [Option<Matrix>], v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.matmul_nt_unchecked(bv));
                acc(grads, *b, av.matmul_tn_unchecked(g));
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.matmul_unchecked(bv));
                acc(grads, *b, g.matmul_tn_unchecked(av));
            }
            Op::LinearConst(a, w) => acc(grads, *a, g.matmul_unchecked(w)),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                let mut col_sums = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (s, x) in col_sums.iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                acc(grads, *row, Matrix::row_vector(col_sums));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.zip_map(bv, |x, y| x * y));
                acc(grads, *b, g.zip_map(av, |x, y| x * y));
            }
            Op::Scale(a, f) => acc(grads, *a, g.map(|x| x * f)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Tanh(a) => acc(grads, *a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
            Op::Softplus(a) => {
                let input = self.value(*a);
                acc(grads, *a, g.zip_map(input, |x, u| x * sigmoid(u)));
            }
            Op::Log(a) => acc(grads, *a, g.zip_map(self.value(*a), |x, u| x / u)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = super::matrix::dot(yr, gr);
                    for ((o, yv), gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                acc(grads, *a, out);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((o, yv), gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                acc(grads, *a, out);
            }
            Op::LayerNormRows { input, inv_std } => {
                let y = &node.value;
                let n = y.cols() as f64;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for (r, &is) in inv_std.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = super::matrix::dot(gr, yr) / n;
                    for ((o, yv), gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = is * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(grads, *input, out);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let mut data = Vec::with_capacity(g.rows() * cols);
                    for r in 0..g.rows() {
                        data.extend_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    acc(grads, p, Matrix::from_raw(g.rows(), cols, data));
                    offset += cols;
                }
            }
            Op::SliceCols { input, start } => {
                let src = self.value(*input);
                let mut out = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    out.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(grads, *input, out);
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let inv = 1.0 / rows as f64;
                let data = g.as_slice().iter().map(|x| x * inv).collect::<Vec<_>>().repeat(rows);
                acc(grads, *a, Matrix::from_raw(rows, g.cols(), data));
            }
            Op::BroadcastRows(a) => {
                let mut sums = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (s, x) in sums.iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                acc(grads, *a, Matrix::row_vector(sums));
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                acc(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Entry { input, row, col } => {
                let (r, c) = self.shape(*input);
                let mut out = Matrix::zeros(r, c);
                out.set(*row, *col, g.get(0, 0));
                acc(grads, *input, out);
            }
            Op::RowMatVec(e, z) => {
                let (em, zm) = (self.value(*e), self.value(*z));
                let r = zm.cols();
                let mut ge = Matrix::zeros(em.rows(), em.cols());
                let mut gz = Matrix::zeros(zm.rows(), r);
                for t in 0..zm.rows() {
                    let (et, zt, gt) = (em.row(t), zm.row(t), g.row(t));
                    let get = ge.row_mut(t);
                    for i in 0..r {
                        for j in 0..r {
                            get[i * r + j] = gt[i] * zt[j];
                        }
                    }
                    let gzt = gz.row_mut(t);
                    for i in 0..r {
                        let gi = gt[i];
                        for j in 0..r {
                            gzt[j] += et[i * r + j] * gi;
                        }
                    }
                }
                acc(grads, *e, ge);
                acc(grads, *z, gz);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                acc(grads, *a, Matrix::from_raw(r, c, g.as_slice().to_vec()));
            }
        }
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Matrix>>,
}

impl Adjoints {
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// One adjoint per registered parameter, shaped like the parameter.
    /// Parameters that never entered the tape get exact zeros.
    pub fn param_grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Matrix> {
        let mut out = store.zeros_like();
        self.accumulate_into(tape, &mut out);
        out
    }

    /// Adds parameter adjoints into an existing buffer aligned with a store.
    pub fn accumulate_into(&self, tape: &Tape, buffer: &mut [Matrix]) {
        for (pid, slot) in tape.param_vars.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = self.of(*v) {
                    buffer[pid].add_assign(g);
                }
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn masked_softmax_in_place(row: &mut [f64], valid: &[bool]) {
    let max = row
        .iter()
        .zip(valid)
        .filter(|(_, &ok)| ok)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (x, &ok) in row.iter_mut().zip(valid) {
        *x = if ok { (*x - max).exp() } else { 0.0 };
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
