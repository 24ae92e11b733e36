//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`GradientTape`] records every operation as a node holding its forward
//! value. Nodes are appended in evaluation order, so walking them backwards
//! is a valid topological order and each node is visited exactly once.
//! Only nodes reachable from a parameter carry adjoints; constants (frozen
//! head weights, input features, detached targets) never receive gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{Cholesky, Matrix};

/// Handle to a node on a [`GradientTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (r x c) + row (1 x c)` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    Square(Var),
    /// Max over consecutive row groups; stores the winning row per output cell.
    GroupMax(Var, usize, Vec<usize>),
    /// `alpha · log Σ_group exp(|x| / alpha)` over consecutive row groups.
    GroupSmoothMaxAbs(Var, usize, f64),
    RowLogSumExp(Var),
    RowSoftmax(Var),
    RowMax(Var, Vec<usize>),
    RowSum(Var),
    /// Picks column `labels[r]` from row `r` of a row-wise log-softmax.
    LogSoftmaxPick(Var, Vec<usize>),
    ColMean(Var),
    SumAll(Var),
    MeanAll(Var),
    SelectRows(Var, Vec<usize>),
    HConcat(Vec<Var>),
    /// `A⁻¹ B` for symmetric positive definite `A`.
    Solve(Var, Var, Cholesky),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    tracked: bool,
}

/// Adjoints produced by [`GradientTape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not depend on any parameter.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

#[derive(Debug, Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, op: Op, value: Matrix, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(Op::Param, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, t))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.tracked(&[a]);
        self.push(Op::Transpose(a), value, t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, t))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        if self.value(row).shape() != (1, c) {
            return Err(shape_err!("add_row: {:?} onto {}x{}", self.value(row).shape(), r, c));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            value.row_mut(i).iter_mut().zip(&bias).for_each(|(v, b)| *v += b);
        }
        let t = self.tracked(&[a, row]);
        Ok(self.push(Op::AddRow(a, row), value, t))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let t = self.tracked(&[a]);
        self.push(Op::Scale(a, k), value, t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let t = self.tracked(&[a]);
        self.push(Op::Relu(a), value, t)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::fabs);
        let t = self.tracked(&[a]);
        self.push(Op::Abs(a), value, t)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let t = self.tracked(&[a]);
        self.push(Op::Square(a), value, t)
    }

    fn check_groups(&self, a: Var, group: usize) -> Result<usize> {
        let r = self.value(a).rows();
        if group == 0 || r % group != 0 {
            return Err(shape_err!("{r} rows do not split into groups of {group}"));
        }
        Ok(r / group)
    }

    /// Max over each block of `group` consecutive rows (patch max-pool).
    pub fn group_max(&mut self, a: Var, group: usize) -> Result<Var> {
        let n = self.check_groups(a, group)?;
        let x = self.value(a);
        let c = x.cols();
        let mut value = Matrix::zeros(n, c);
        let mut arg = vec![0usize; n * c];
        for i in 0..n {
            for j in 0..c {
                let mut best = i * group;
                for r in i * group + 1..(i + 1) * group {
                    if x[(r, j)] > x[(best, j)] {
                        best = r;
                    }
                }
                value[(i, j)] = x[(best, j)];
                arg[i * c + j] = best;
            }
        }
        let t = self.tracked(&[a]);
        Ok(self.push(Op::GroupMax(a, group, arg), value, t))
    }

    /// Smooth maximum of absolute values over consecutive row groups.
    pub fn group_smooth_max_abs(&mut self, a: Var, group: usize, alpha: f64) -> Result<Var> {
        let n = self.check_groups(a, group)?;
        let x = self.value(a);
        let c = x.cols();
        let mut value = Matrix::zeros(n, c);
        for i in 0..n {
            for j in 0..c {
                let vals = (i * group..(i + 1) * group).map(|r| libm::fabs(x[(r, j)]));
                value[(i, j)] = crate::concepts::smooth_max(vals, alpha);
            }
        }
        let t = self.tracked(&[a]);
        Ok(self.push(Op::GroupSmoothMaxAbs(a, group, alpha), value, t))
    }

    pub fn row_logsumexp(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::column_vector(&(0..x.rows()).map(|r| logsumexp(x.row(r))).collect::<Vec<_>>());
        let t = self.tracked(&[a]);
        self.push(Op::RowLogSumExp(a), value, t)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..x.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let t = self.tracked(&[a]);
        self.push(Op::RowSoftmax(a), value, t)
    }

    pub fn row_max(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut arg = Vec::with_capacity(x.rows());
        let mut out = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let (k, &v) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |best, (k, v)| if *v > *best.1 { (k, v) } else { best });
            arg.push(k);
            out.push(v);
        }
        let t = self.tracked(&[a]);
        self.push(Op::RowMax(a, arg), Matrix::column_vector(&out), t)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::column_vector(&(0..x.rows()).map(|r| x.row(r).iter().sum()).collect::<Vec<_>>());
        let t = self.tracked(&[a]);
        self.push(Op::RowSum(a), value, t)
    }

    /// `log softmax(a)[r, labels[r]]` for every row, as a column.
    pub fn log_softmax_pick(&mut self, a: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if labels.len() != x.rows() || labels.iter().any(|&l| l >= x.cols()) {
            return Err(shape_err!("{} labels for {}x{} logits", labels.len(), x.rows(), x.cols()));
        }
        let out: Vec<f64> = (0..x.rows()).map(|r| x[(r, labels[r])] - logsumexp(x.row(r))).collect();
        let t = self.tracked(&[a]);
        Ok(self.push(Op::LogSoftmaxPick(a, labels.to_vec()), Matrix::column_vector(&out), t))
    }

    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::Argument("mean of zero rows".into()));
        }
        let value = Matrix::row_vector(&x.column_means());
        let t = self.tracked(&[a]);
        Ok(self.push(Op::ColMean(a), value, t))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let t = self.tracked(&[a]);
        self.push(Op::SumAll(a), value, t)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data().is_empty() {
            return Err(Error::Argument("mean of an empty matrix".into()));
        }
        let value = Matrix::scalar(x.sum() / x.data().len() as f64);
        let t = self.tracked(&[a]);
        Ok(self.push(Op::MeanAll(a), value, t))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let r = self.value(a).rows();
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err!("row {bad} out of range for {r} rows"));
        }
        let value = self.value(a).select_rows(idx);
        let t = self.tracked(&[a]);
        Ok(self.push(Op::SelectRows(a, idx.to_vec()), value, t))
    }

    /// Concatenates equally tall matrices side by side.
    pub fn hconcat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&v| self.value(v).rows()).ok_or_else(|| Error::Argument("empty hconcat".into()))?;
        let cols: usize = parts.iter().map(|&v| self.value(v).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let x = self.value(p);
            if x.rows() != rows {
                return Err(shape_err!("hconcat of {} and {} rows", rows, x.rows()));
            }
            for r in 0..rows {
                value.row_mut(r)[offset..offset + x.cols()].copy_from_slice(x.row(r));
            }
            offset += x.cols();
        }
        let t = self.tracked(parts);
        Ok(self.push(Op::HConcat(parts.to_vec()), value, t))
    }

    /// `A⁻¹ B` through a Cholesky factorization of symmetric positive definite `A`.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let chol = self.value(a).cholesky()?;
        if self.value(b).rows() != chol.dim() {
            return Err(shape_err!("solve: {} rows against a {}x{} system", self.value(b).rows(), chol.dim(), chol.dim()));
        }
        let value = chol.solve(self.value(b));
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Solve(a, b, chol), value, t))
    }

    /// Back-propagates `seed · ∂loss` through the tape. A tape can be
    /// differentiated once; a second call is a state error.
    pub fn backward(&mut self, loss: Var, seed: f64) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("gradient tape already consumed by a backward pass".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(shape_err!("loss must be 1x1, got {:?}", self.value(loss).shape()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(seed));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.op, Op::Param | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, delta: Matrix| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            let tracked = |v: Var| self.nodes[v.0].tracked;
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Param | Op::Constant => unreachable!(),
                Op::MatMul(a, b) => {
                    if tracked(*a) {
                        acc(*a, g.matmul_t(val(*b)));
                    }
                    if tracked(*b) {
                        acc(*b, val(*a).t_matmul(&g));
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if tracked(*a) {
                        acc(*a, g.zip_map(val(*b), |x, y| x * y));
                    }
                    if tracked(*b) {
                        acc(*b, g.zip_map(val(*a), |x, y| x * y));
                    }
                }
                Op::AddRow(a, row) => {
                    if tracked(*row) {
                        let mut s = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            s.row_mut(0).iter_mut().zip(g.row(r)).for_each(|(o, v)| *o += v);
                        }
                        acc(*row, s);
                    }
                    acc(*a, g);
                }
                Op::Scale(a, k) => acc(*a, g.scale(*k)),
                Op::Relu(a) => acc(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
                Op::Abs(a) => acc(*a, g.zip_map(val(*a), |d, x| d * sign(x))),
                Op::Square(a) => acc(*a, g.zip_map(val(*a), |d, x| 2.0 * d * x)),
                Op::GroupMax(a, _group, arg) => {
                    let x = val(*a);
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    let c = g.cols();
                    for (cell, &r) in arg.iter().enumerate() {
                        d[(r, cell % c)] += g.data()[cell];
                    }
                    acc(*a, d);
                }
                Op::GroupSmoothMaxAbs(a, group, alpha) => {
                    let x = val(*a);
                    let out = &node.value;
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for n in 0..out.rows() {
                        for j in 0..out.cols() {
                            let s = out[(n, j)];
                            let gn = g[(n, j)];
                            for r in n * group..(n + 1) * group {
                                let v = x[(r, j)];
                                let w = libm::exp((libm::fabs(v) - s) / alpha);
                                d[(r, j)] = gn * w * sign(v);
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::RowLogSumExp(a) => {
                    let x = val(*a);
                    let mut d = x.clone();
                    for r in 0..x.rows() {
                        let gr = g[(r, 0)];
                        let row = d.row_mut(r);
                        softmax_in_place(row);
                        row.iter_mut().for_each(|v| *v *= gr);
                    }
                    acc(*a, d);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)).for_each(|(o, (y, g))| *o = y * (g - inner));
                    }
                    acc(*a, d);
                }
                Op::RowMax(a, arg) => {
                    let x = val(*a);
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for (r, &k) in arg.iter().enumerate() {
                        d[(r, k)] = g[(r, 0)];
                    }
                    acc(*a, d);
                }
                Op::RowSum(a) => {
                    let x = val(*a);
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let gr = g[(r, 0)];
                        d.row_mut(r).iter_mut().for_each(|v| *v = gr);
                    }
                    acc(*a, d);
                }
                Op::LogSoftmaxPick(a, labels) => {
                    let x = val(*a);
                    let mut d = x.clone();
                    for r in 0..x.rows() {
                        let gr = g[(r, 0)];
                        let row = d.row_mut(r);
                        softmax_in_place(row);
                        row.iter_mut().for_each(|v| *v *= -gr);
                        row[labels[r]] += gr;
                    }
                    acc(*a, d);
                }
                Op::ColMean(a) => {
                    let x = val(*a);
                    let n = x.rows() as f64;
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        d.row_mut(r).iter_mut().zip(g.row(0)).for_each(|(o, v)| *o = v / n);
                    }
                    acc(*a, d);
                }
                Op::SumAll(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Matrix::filled(r, c, g.item()));
                }
                Op::MeanAll(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Matrix::filled(r, c, g.item() / (r * c) as f64));
                }
                Op::SelectRows(a, idx) => {
                    let x = val(*a);
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for (k, &r) in idx.iter().enumerate() {
                        d.row_mut(r).iter_mut().zip(g.row(k)).for_each(|(o, v)| *o += v);
                    }
                    acc(*a, d);
                }
                Op::HConcat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let c = val(p).cols();
                        if tracked(p) {
                            let mut d = Matrix::zeros(g.rows(), c);
                            for r in 0..g.rows() {
                                d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                            }
                            acc(p, d);
                        }
                        offset += c;
                    }
                }
                Op::Solve(a, b, chol) => {
                    // X = A⁻¹B:  dB = A⁻ᵀ dX,  dA = -dB Xᵀ  (A symmetric).
                    let db = chol.solve(&g);
                    if tracked(*a) {
                        acc(*a, db.matmul_t(&node.value).scale(-1.0));
                    }
                    acc(*b, db);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Overflow-safe `log Σ exp(x)`.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + libm::log(x.iter().map(|v| libm::exp(v - m)).sum::<f64>())
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - m);
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

impl core::fmt::Display for Var {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&format!("%{}", self.0))
    }
}
