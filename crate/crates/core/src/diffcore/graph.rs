//! Matrix-valued reverse-mode tape.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the nodes once in reverse order, accumulating `∂loss/∂node` and
//! depositing parameter gradients into the [`ParamStore`]. Nodes that do not
//! depend on any parameter are skipped.

use std::rc::Rc;

use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Probability clamp used by the binary cross-entropy node.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    RowNorm { x: Var, inv_std: Vec<f64> },
    ColNorm { x: Var, inv_std: Vec<f64> },
    Gather(Var, Rc<[usize]>),
    GroupSoftmax(Var, usize),
    GroupSum(Var, usize),
    GroupMax { x: Var, argmax: Vec<usize> },
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    WrapAngle(Var),
    SumAll(Var),
    WeightedRowSum(Var, Vec<f64>),
    SmoothL1Rows { x: Var, target: Matrix, delta: f64 },
    Bce { p: Var, labels: Vec<f64> },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    /// Number of nodes whose backward rule ran.
    pub visited: usize,
}

impl Gradients {
    /// `∂loss/∂v`, or `None` when `v` does not influence the loss through
    /// any parameter-dependent path.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// A forward-pass recording.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Input => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, &[])
    }

    /// Records a parameter read; its gradient flows back into `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), &[])
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    /// Copies `v`'s value as a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x + b` with `b` a `1×C` row broadcast over all rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut value = xv.clone();
        let brow = bv.row(0).to_vec();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(&brow) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(x, b), &[x, b]))
    }

    /// `x ⊙ g` with `g` a `1×C` row broadcast over all rows of `x`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(g));
        if gv.rows() != 1 || gv.cols() != xv.cols() {
            return Err(Error::shape(
                "mul_row",
                format!("{:?} * row {:?}", xv.shape(), gv.shape()),
            ));
        }
        let mut value = xv.clone();
        let grow = gv.row(0).to_vec();
        for r in 0..value.rows() {
            for (o, g) in value.row_mut(r).iter_mut().zip(&grow) {
                *o *= g;
            }
        }
        Ok(self.push(value, Op::MulRow(x, g), &[x, g]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, no affine.
    pub fn row_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() < 2 {
            return Err(Error::shape("layer_norm", "needs at least two channels"));
        }
        let mut value = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..value.rows() {
            inv_std.push(standardize(value.row_mut(r), eps));
        }
        Ok(self.push(value, Op::RowNorm { x, inv_std }, &[x]))
    }

    /// Per-column standardization over the rows (batch statistics).
    pub fn col_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() < 2 {
            return Err(Error::shape("batch_norm", "needs at least two rows"));
        }
        let mut value = xv.clone();
        let (rows, cols) = value.shape();
        let mut inv_std = Vec::with_capacity(cols);
        let mut buf = vec![0.0; rows];
        for c in 0..cols {
            for (r, b) in buf.iter_mut().enumerate() {
                *b = value.get(r, c);
            }
            inv_std.push(standardize(&mut buf, eps));
            for (r, b) in buf.iter().enumerate() {
                value.set(r, c, *b);
            }
        }
        Ok(self.push(value, Op::ColNorm { x, inv_std }, &[x]))
    }

    /// Row gather: output row `r` is input row `idx[r]`.
    pub fn gather(&mut self, x: Var, idx: Rc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::shape(
                "gather",
                format!("row {bad} out of {}", xv.rows()),
            ));
        }
        let value = xv.select_rows(&idx);
        Ok(self.push(value, Op::Gather(x, idx), &[x]))
    }

    /// Repeats every row `k` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        let n = self.value(x).rows();
        let idx: Rc<[usize]> = (0..n * k).map(|r| r / k).collect();
        self.gather(x, idx)
    }

    fn check_groups(&self, op: &'static str, x: Var, group: usize) -> Result<()> {
        let rows = self.value(x).rows();
        if group == 0 || rows % group != 0 {
            return Err(Error::shape(
                op,
                format!("{rows} rows not divisible into groups of {group}"),
            ));
        }
        Ok(())
    }

    /// Softmax over each block of `group` consecutive rows, independently per
    /// column.
    pub fn group_softmax(&mut self, x: Var, group: usize) -> Result<Var> {
        self.check_groups("group_softmax", x, group)?;
        let mut value = self.value(x).clone();
        softmax_groups_in_place(&mut value, group);
        Ok(self.push(value, Op::GroupSoftmax(x, group), &[x]))
    }

    /// Sums each block of `group` consecutive rows.
    pub fn group_sum(&mut self, x: Var, group: usize) -> Result<Var> {
        self.check_groups("group_sum", x, group)?;
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut value = Matrix::zeros(rows / group, cols);
        for r in 0..rows {
            let src = xv.row(r);
            for (o, v) in value.row_mut(r / group).iter_mut().zip(src) {
                *o += v;
            }
        }
        Ok(self.push(value, Op::GroupSum(x, group), &[x]))
    }

    /// Column-wise max over each block of `group` consecutive rows; ties go
    /// to the first row.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        self.check_groups("group_max", x, group)?;
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let groups = rows / group;
        let mut value = Matrix::zeros(groups, cols);
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            for c in 0..cols {
                let mut best = g * group;
                for r in g * group + 1..(g + 1) * group {
                    if xv.get(r, c) > xv.get(best, c) {
                        best = r;
                    }
                }
                value.set(g, c, xv.get(best, c));
                argmax[g * cols + c] = best;
            }
        }
        Ok(self.push(value, Op::GroupMax { x, argmax }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                value.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {} columns", xv.cols()),
            ));
        }
        let mut value = Matrix::zeros(xv.rows(), end - start);
        for r in 0..xv.rows() {
            value.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        Ok(self.push(value, Op::SliceCols(x, start), &[x]))
    }

    /// Wraps every entry to `(-pi, pi]`; the derivative is one everywhere.
    pub fn wrap_angle(&mut self, x: Var) -> Var {
        let value = self.value(x).map(crate::geometry::wrap_angle);
        self.push(value, Op::WrapAngle(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    /// `Σ_r w_r Σ_c x_rc`, a `1×1` node.
    pub fn weighted_row_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.rows() {
            return Err(Error::shape(
                "weighted_row_sum",
                format!("{} weights for {} rows", weights.len(), xv.rows()),
            ));
        }
        let total = (0..xv.rows())
            .map(|r| weights[r] * xv.row(r).iter().sum::<f64>())
            .sum();
        Ok(self.push(Matrix::scalar(total), Op::WeightedRowSum(x, weights), &[x]))
    }

    /// Per-row sum of smooth-L1 terms of `x - target`; output is `n×1`.
    pub fn smooth_l1_rows(&mut self, x: Var, target: Matrix, delta: f64) -> Result<Var> {
        self.check_target("smooth_l1_rows", x, &target)?;
        let xv = self.value(x);
        let mut value = Matrix::zeros(xv.rows(), 1);
        for r in 0..xv.rows() {
            let s = xv
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(a, t)| smooth_l1(a - t, delta))
                .sum();
            value.set(r, 0, s);
        }
        Ok(self.push(value, Op::SmoothL1Rows { x, target, delta }, &[x]))
    }

    /// Element-wise binary cross-entropy of probabilities `p` (`n×1`) against
    /// labels, with `p` clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, p: Var, labels: Vec<f64>) -> Result<Var> {
        let pv = self.value(p);
        if pv.cols() != 1 || pv.rows() != labels.len() {
            return Err(Error::shape(
                "bce",
                format!("{:?} vs {} labels", pv.shape(), labels.len()),
            ));
        }
        let value = Matrix::column(
            &pv.as_slice()
                .iter()
                .zip(&labels)
                .map(|(&q, &y)| bce(q, y))
                .collect::<Vec<_>>(),
        );
        Ok(self.push(value, Op::Bce { p, labels }, &[p]))
    }

    fn check_target(&self, op: &'static str, x: Var, target: &Matrix) -> Result<()> {
        if self.shape(x) != target.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs target {:?}", self.shape(x), target.shape()),
            ));
        }
        Ok(())
    }

    /// Back-propagates from the scalar `loss`, accumulating into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward called without a recorded forward pass".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            visited += 1;
            self.backprop_node(i, &g, &mut grads, store)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
        store: &mut ParamStore,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, d: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => store.get_mut(*id).grad.add_assign(g),
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    acc(*a, g.matmul_nt(self.value(*b))?);
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                acc(*b, column_sums(g));
            }
            Op::MulRow(x, gam) => {
                let gv = self.value(*gam).row(0).to_vec();
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    for (d, s) in dx.row_mut(r).iter_mut().zip(&gv) {
                        *d *= s;
                    }
                }
                acc(*x, dx);
                acc(*gam, column_sums(&g.zip_map(self.value(*x), |a, b| a * b)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |d, y| d * y));
                acc(*b, g.zip_map(self.value(*a), |d, x| d * x));
            }
            Op::AddScalar(x) | Op::WrapAngle(x) => acc(*x, g.clone()),
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::Relu(x) => acc(
                *x,
                g.zip_map(self.value(*x), |d, v| if v > 0.0 { d } else { 0.0 }),
            ),
            Op::Sigmoid(x) => acc(*x, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
            Op::RowNorm { x, inv_std } => {
                let y = &node.value;
                let c = y.cols() as f64;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let sg: f64 = gr.iter().sum();
                    let sgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gi), &yi) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] / c * (c * gi - sg - yi * sgy);
                    }
                }
                acc(*x, dx);
            }
            Op::ColNorm { x, inv_std } => {
                let y = &node.value;
                let (rows, cols) = y.shape();
                let n = rows as f64;
                let mut dx = Matrix::zeros(rows, cols);
                for c in 0..cols {
                    let mut sg = 0.0;
                    let mut sgy = 0.0;
                    for r in 0..rows {
                        sg += g.get(r, c);
                        sgy += g.get(r, c) * y.get(r, c);
                    }
                    for r in 0..rows {
                        let v = inv_std[c] / n * (n * g.get(r, c) - sg - y.get(r, c) * sgy);
                        dx.set(r, c, v);
                    }
                }
                acc(*x, dx);
            }
            Op::Gather(x, idx) => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Matrix::zeros(rows, cols);
                for (o, &src) in idx.iter().enumerate() {
                    for (d, v) in dx.row_mut(src).iter_mut().zip(g.row(o)) {
                        *d += v;
                    }
                }
                acc(*x, dx);
            }
            Op::GroupSoftmax(x, group) => {
                let y = &node.value;
                let (rows, cols) = y.shape();
                let mut dx = Matrix::zeros(rows, cols);
                for start in (0..rows).step_by(*group) {
                    for c in 0..cols {
                        let dot: f64 = (start..start + group)
                            .map(|r| g.get(r, c) * y.get(r, c))
                            .sum();
                        for r in start..start + group {
                            dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::GroupSum(x, group) => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    dx.row_mut(r).copy_from_slice(g.row(r / group));
                }
                acc(*x, dx);
            }
            Op::GroupMax { x, argmax } => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Matrix::zeros(rows, cols);
                for (k, &src) in argmax.iter().enumerate() {
                    let c = k % cols;
                    let grp = k / cols;
                    let v = dx.get(src, c) + g.get(grp, c);
                    dx.set(src, c, v);
                }
                acc(*x, dx);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.nodes[p.0].requires_grad {
                        let mut dp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        acc(p, dp);
                    }
                    off += cols;
                }
            }
            Op::SliceCols(x, start) => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Matrix::zeros(rows, cols);
                let w = g.cols();
                for r in 0..rows {
                    dx.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::SumAll(x) => {
                let (rows, cols) = self.shape(*x);
                acc(*x, Matrix::filled(rows, cols, g.get(0, 0)));
            }
            Op::WeightedRowSum(x, w) => {
                let (rows, cols) = self.shape(*x);
                let s = g.get(0, 0);
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    dx.row_mut(r).iter_mut().for_each(|d| *d = s * w[r]);
                }
                acc(*x, dx);
            }
            Op::SmoothL1Rows { x, target, delta } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let gr = g.get(r, 0);
                    for c in 0..xv.cols() {
                        dx.set(r, c, gr * smooth_l1_grad(xv.get(r, c) - target.get(r, c), *delta));
                    }
                }
                acc(*x, dx);
            }
            Op::Bce { p, labels } => {
                let pv = self.value(*p);
                let dp: Vec<f64> = pv
                    .as_slice()
                    .iter()
                    .zip(labels)
                    .zip(g.as_slice())
                    .map(|((&q, &y), &d)| d * bce_grad(q, y))
                    .collect();
                acc(*p, Matrix::column(&dp));
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Standardizes the values in place; returns `1 / sqrt(var + eps)`.
fn standardize(vals: &mut [f64], eps: f64) -> f64 {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for v in vals.iter_mut() {
        *v = (*v - mean) * inv;
    }
    inv
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn smooth_l1(d: f64, delta: f64) -> f64 {
    let a = d.abs();
    if a < delta {
        0.5 * d * d / delta
    } else {
        a - 0.5 * delta
    }
}

#[inline]
fn smooth_l1_grad(d: f64, delta: f64) -> f64 {
    if d.abs() < delta {
        d / delta
    } else {
        d.signum()
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

#[inline]
pub fn bce(p: f64, y: f64) -> f64 {
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
        log::debug!("bce: probability {p} clamped");
    }
    let q = clamp_prob(p);
    -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
}

#[inline]
fn bce_grad(p: f64, y: f64) -> f64 {
    if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
        0.0
    } else {
        (p - y) / (p * (1.0 - p))
    }
}

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn softmax_groups_in_place(m: &mut Matrix, group: usize) {
    let (rows, cols) = m.shape();
    let mut buf = vec![0.0; group];
    for start in (0..rows).step_by(group) {
        for c in 0..cols {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = m.get(start + k, c);
            }
            softmax_in_place(&mut buf);
            for (k, b) in buf.iter().enumerate() {
                m.set(start + k, c, *b);
            }
        }
    }
}

/// Axis selector for [`softmax`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Normalize down each column.
    Rows,
    /// Normalize along each row.
    Cols,
}

/// Max-shifted softmax of a matrix along `axis`.
pub fn softmax(x: &Matrix, axis: Axis) -> Matrix {
    match axis {
        Axis::Cols => {
            let mut out = x.clone();
            for r in 0..out.rows() {
                softmax_in_place(out.row_mut(r));
            }
            out
        }
        Axis::Rows => {
            let mut out = x.clone();
            if out.rows() > 0 {
                let rows = out.rows();
                softmax_groups_in_place(&mut out, rows);
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_closed_forms() {
        let m = Matrix::from_rows(&[[0.0, 0.0], [0.0, 3f64.ln()]]).unwrap();
        let s = softmax(&m, Axis::Cols);
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(1, 1) - 0.75).abs() < 1e-15);

        let shifted = softmax(&m.map(|v| v + 123.4), Axis::Cols);
        assert!(shifted.max_abs_diff(&s) <= 1e-12);

        let down = softmax(&m, Axis::Rows);
        assert!((down.get(0, 1) - 0.25).abs() < 1e-15);
        assert!((down.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_needs_forward() {
        let g = Graph::new();
        let mut store = ParamStore::new();
        assert!(matches!(g.backward(Var(0), &mut store), Err(Error::Usage(_))));

        let mut g = Graph::new();
        let x = g.input(Matrix::zeros(2, 2));
        assert!(matches!(g.backward(x, &mut store), Err(Error::Usage(_))));
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut store = ParamStore::new();
        let id = store
            .insert("w", Matrix::from_rows(&[[1.0, -2.0], [3.0, 0.5]]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let loss = g.sum(w);
        let grads = g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad, Matrix::filled(2, 2, 1.0));
        assert_eq!(grads.visited, 2);

        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad, Matrix::filled(2, 2, 2.0));
    }

    #[test]
    fn every_node_visited_once() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Matrix::filled(1, 3, 0.5)).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let a = g.relu(w);
        let b = g.sigmoid(w);
        let c = g.add(a, b).unwrap();
        let d = g.mul(c, w).unwrap();
        let loss = g.sum(d);
        let grads = g.backward(loss, &mut store).unwrap();
        assert_eq!(grads.visited, g.len());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Matrix::filled(1, 2, 2.0)).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let frozen = g.detach(w);
        let prod = g.mul(w, frozen).unwrap();
        let loss = g.sum(prod);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn bce_clamps() {
        assert!(bce(1.0, 1.0) <= 1e-6);
        assert!(bce(0.0, 0.0) <= 1e-6);
        assert!((bce(0.5, 1.0) - 2f64.ln()).abs() < 1e-15);
    }
}
