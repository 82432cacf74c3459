//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] records every forward operation together with its output value.
//! [`Tape::backward`] walks the record in reverse, accumulating adjoints, and
//! adds the adjoint of each parameter leaf into the owning [`ParamStore`].

use alloc::vec;
use alloc::vec::Vec;

use super::matrix::{log_sum_exp, softmax_in_place, Matrix};
use super::params::{ParamId, ParamStore};
use super::TensorError;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    RowSoftmax(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, count: usize },
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.adjoints.get(var.0).and_then(Option::as_ref)
    }
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, name: &'static str) -> Result<Var, TensorError> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn v(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// Records a constant leaf. Its adjoint is still computed, which lets
    /// tests differentiate with respect to inputs.
    pub fn input(&mut self, value: Matrix) -> Result<Var, TensorError> {
        self.push(value, Op::Input, "input")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, TensorError> {
        self.push(store.value(id).clone(), Op::Param(id), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.v(a).matmul(self.v(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.v(a).matmul_t(self.v(b))?;
        self.push(value, Op::MatMulT(a, b), "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.v(a).add(self.v(b))?;
        self.push(value, Op::Add(a, b), "add")
    }

    /// Adds a `1×c` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let value = self.v(a).add_row(self.v(bias))?;
        self.push(value, Op::AddRow(a, bias), "add_row")
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.v(a).hadamard(self.v(b))?;
        self.push(value, Op::Hadamard(a, b), "hadamard")
    }

    /// Multiplies by a fixed scalar.
    pub fn layer_scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let value = self.v(a).scale(factor);
        self.push(value, Op::Scale(a, factor), "layer_scale")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.v(a).transpose();
        self.push(value, Op::Transpose(a), "transpose")
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.v(a).row_softmax();
        self.push(value, Op::RowSoftmax(a), "row_softmax")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.v(a).relu();
        self.push(value, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.v(a).sigmoid();
        self.push(value, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.v(a).tanh();
        self.push(value, Op::Tanh(a), "tanh")
    }

    /// Per-row standardization (zero mean, unit variance), no affine part.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.v(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        let n = x.cols() as f64;
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        self.push(out, Op::LayerNorm(a, inv_std), "layer_norm")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let x = self.v(a);
        if width == 0 || start + width > x.cols() {
            return Err(TensorError::ShapeMismatch { op: "slice_cols", lhs: x.shape(), rhs: (start, width) });
        }
        let value = Matrix::from_fn(x.rows(), width, |i, j| x.get(i, start + j));
        self.push(value, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyShape { rows: 0, cols: 0 })?;
        let rows = self.v(*first).rows();
        let mut cols = 0;
        for p in parts {
            let s = self.v(*p).shape();
            if s.0 != rows {
                return Err(TensorError::ShapeMismatch { op: "concat_cols", lhs: self.v(*first).shape(), rhs: s });
            }
            cols += s.1;
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let x = self.v(*p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + x.cols()].copy_from_slice(x.row(r));
            }
            offset += x.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Selects rows of `a` by index (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, TensorError> {
        let x = self.v(a);
        if index.is_empty() {
            return Err(TensorError::EmptyShape { rows: 0, cols: x.cols() });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.rows()) {
            return Err(TensorError::ShapeMismatch { op: "gather_rows", lhs: x.shape(), rhs: (bad, 1) });
        }
        let mut out = Matrix::zeros(index.len(), x.cols());
        for (r, &i) in index.iter().enumerate() {
            out.row_mut(r).copy_from_slice(x.row(i));
        }
        self.push(out, Op::GatherRows(a, index.to_vec()), "gather_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyShape { rows: 0, cols: 0 })?;
        let cols = self.v(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let x = self.v(*p);
            if x.cols() != cols {
                return Err(TensorError::ShapeMismatch { op: "concat_rows", lhs: self.v(*first).shape(), rhs: x.shape() });
            }
            data.extend_from_slice(x.data());
            rows += x.rows();
        }
        let value = Matrix::new(rows, cols, data)?;
        self.push(value, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Matrix::filled(1, 1, self.v(a).sum());
        self.push(value, Op::Sum(a), "sum")
    }

    /// Mean softmax cross-entropy over rows of `logits` against class
    /// indices. Rows with a `None` target are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, TensorError> {
        let x = self.v(logits);
        if targets.len() != x.rows() {
            return Err(TensorError::ShapeMismatch { op: "cross_entropy", lhs: x.shape(), rhs: (targets.len(), 1) });
        }
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= x.cols() {
                    return Err(TensorError::ShapeMismatch { op: "cross_entropy", lhs: x.shape(), rhs: (r, t) });
                }
                let row = x.row(r);
                total += log_sum_exp(row) - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), count },
            "cross_entropy",
        )
    }

    /// Differentiates the scalar `loss` with respect to every recorded node
    /// and adds parameter adjoints into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients, TensorError> {
        let grads = self.gradients(loss)?;
        for (node, adj) in self.nodes.iter().zip(&grads.adjoints) {
            if let (Op::Param(id), Some(g)) = (&node.op, adj) {
                store.accumulate_grad(*id, g)?;
            }
        }
        Ok(grads)
    }

    /// Reverse sweep without touching any parameter store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let shape = self.v(loss).shape();
        if shape != (1, 1) {
            return Err(TensorError::NotScalar { rows: shape.0, cols: shape.1 });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].clone() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.v(*b))?;
                    let gb = self.v(*a).t_matmul(&g)?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.matmul(self.v(*b))?;
                    let gb = g.t_matmul(self.v(*a))?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (x, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *x += v;
                        }
                    }
                    acc(&mut adj, *bias, gb);
                    acc(&mut adj, *a, g);
                }
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(self.v(*b))?;
                    let gb = g.hadamard(self.v(*a))?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut adj, *a, g.scale(*f)),
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, x) in ga.row_mut(r).iter_mut().enumerate() {
                            *x = yr[j] * (gr[j] - inner);
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let x = self.v(*a);
                    let ga = Matrix::from_fn(x.rows(), x.cols(), |i, j| if x.get(i, j) > 0.0 { g.get(i, j) } else { 0.0 });
                    acc(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = Matrix::from_fn(y.rows(), y.cols(), |i, j| {
                        let s = y.get(i, j);
                        g.get(i, j) * s * (1.0 - s)
                    });
                    acc(&mut adj, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = Matrix::from_fn(y.rows(), y.cols(), |i, j| {
                        let t = y.get(i, j);
                        g.get(i, j) * (1.0 - t * t)
                    });
                    acc(&mut adj, *a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (j, x) in ga.row_mut(r).iter_mut().enumerate() {
                            *x = inv_std[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let x = self.v(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.v(*p).cols();
                        let gp = Matrix::from_fn(g.rows(), w, |i, j| g.get(i, offset + j));
                        acc(&mut adj, *p, gp);
                        offset += w;
                    }
                }
                Op::GatherRows(a, index) => {
                    let x = self.v(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for (r, &i) in index.iter().enumerate() {
                        for (d, &s) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.v(*p).rows();
                        let gp = Matrix::from_fn(h, g.cols(), |i, j| g.get(offset + i, j));
                        acc(&mut adj, *p, gp);
                        offset += h;
                    }
                }
                Op::Sum(a) => {
                    let x = self.v(*a);
                    acc(&mut adj, *a, Matrix::filled(x.rows(), x.cols(), g.get(0, 0)));
                }
                Op::CrossEntropy { logits, targets, count } => {
                    let x = self.v(*logits);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    if *count > 0 {
                        let w = g.get(0, 0) / *count as f64;
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = *t {
                                let row = ga.row_mut(r);
                                row.copy_from_slice(x.row(r));
                                softmax_in_place(row);
                                row[t] -= 1.0;
                                row.iter_mut().for_each(|v| *v *= w);
                            }
                        }
                    }
                    acc(&mut adj, *logits, ga);
                }
            }
        }
        adj.resize(self.nodes.len(), None);
        Ok(Gradients { adjoints: adj })
    }
}

fn acc(adj: &mut [Option<Matrix>], var: Var, g: Matrix) {
    match &mut adj[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

