use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

use super::kernels::{self, CholeskyView};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Elu(Var),
    Exp(Var),
    Log(Var),
    LogSumExpRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    GaussianLogKernels { x: Var, means: Var, chol: Var, normalized: bool, diagonal: bool },
    DecorrelatedOffsets { x: Var, means: Var, chol: Var, diagonal: bool },
    BlockMatMul(Var, Var),
    BlockRowDot(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Elu(..) => "elu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::SumRows(..) => "sum_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
            Op::GaussianLogKernels { .. } => "gaussian_log_kernels",
            Op::DecorrelatedOffsets { .. } => "decorrelated_offsets",
            Op::BlockMatMul(..) => "block_matmul",
            Op::BlockRowDot(..) => "block_row_dot",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Single-use record of a forward computation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn shape_err(node: usize, op: &'static str, detail: String) -> Error {
    Error::NodeShape { node, op, detail }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    /// Leaf whose gradient is wanted (parameter or differentiated input).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(self.next_id(), op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err(self.next_id(), "matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let out = crate::tensor::matmul(ta, tb)?;
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    /// `a[i, j] + row[j]` for a matrix `a` and a vector (or `1 x m` matrix) `row`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if ta.rank() != 2 || tr.len() != ta.cols() {
            return Err(shape_err(self.next_id(), "add_row", format!("{:?} + row {:?}", ta.shape(), tr.shape())));
        }
        let c = ta.cols();
        let mut out = ta.clone();
        for r in 0..ta.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *v += b;
            }
        }
        debug_assert_eq!(out.cols(), c);
        Ok(self.push(Op::AddRow(a, row), out, &[a, row]))
    }

    /// `a[i, j] * col[i]` for a matrix `a` and a column with one entry per row.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        if ta.rank() != 2 || tc.len() != ta.rows() {
            return Err(shape_err(self.next_id(), "mul_col", format!("{:?} * col {:?}", ta.shape(), tc.shape())));
        }
        let mut out = ta.clone();
        for r in 0..ta.rows() {
            let s = tc.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(Op::MulCol(a, col), out, &[a, col]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), out, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out, &[a])
    }

    /// ELU with `alpha = 1`.
    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(Op::Elu(a), out, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out, &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out, &[a])
    }

    /// Row-wise log-sum-exp of a matrix (a vector counts as one row); output `rows x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let data = (0..r).map(|i| kernels::logsumexp(&ta.data()[i * c..(i + 1) * c])).collect();
        let out = Tensor::new(vec![r, 1], data).expect("rows x 1");
        self.push(Op::LogSumExpRows(a), out, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = ta.clone();
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let lse = kernels::logsumexp(row);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        self.push(Op::SoftmaxRows(a), out, &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = ta.clone();
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let lse = kernels::logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(Op::LogSoftmaxRows(a), out, &[a])
    }

    /// Sum along each row; output `rows x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let data = (0..r).map(|i| ta.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let out = Tensor::new(vec![r, 1], data).expect("rows x 1");
        self.push(Op::SumRows(a), out, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), out, &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || start > end || end > ta.rows() {
            return Err(shape_err(self.next_id(), "slice_rows", format!("rows {start}..{end} of {:?}", ta.shape())));
        }
        let out = ta.slice_rows(start, end);
        Ok(self.push(Op::SliceRows(a, start), out, &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || start > end || end > ta.cols() {
            return Err(shape_err(self.next_id(), "slice_cols", format!("cols {start}..{end} of {:?}", ta.shape())));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&ta.data()[i * c + start..i * c + end]);
        }
        let out = Tensor::matrix(r, end - start, data)?;
        Ok(self.push(Op::SliceCols(a, start), out, &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&tensors).map_err(|e| shape_err(self.next_id(), "concat_rows", e.to_string()))?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, parts))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let id = self.next_id();
        let out = self.value(a).clone().reshape(shape).map_err(|e| shape_err(id, "reshape", e.to_string()))?;
        Ok(self.push(Op::Reshape(a), out, &[a]))
    }

    fn check_mixture_shapes(&self, op: &'static str, x: Var, means: Var, chol: Var) -> Result<(usize, usize, usize)> {
        let (tx, tm, tc) = (self.value(x), self.value(means), self.value(chol));
        let d = tx.cols();
        let m = tm.rows();
        let ok = tx.rank() == 2 && tm.rank() == 2 && tm.cols() == d && tc.shape() == [m, d, d];
        if !ok {
            return Err(shape_err(
                self.next_id(),
                op,
                format!("x {:?}, means {:?}, chol {:?}", tx.shape(), tm.shape(), tc.shape()),
            ));
        }
        Ok((tx.rows(), m, d))
    }

    /// Per-component Gaussian log-kernels, `n x M`.
    ///
    /// `chol` holds `M x d x d` raw factors `(s_i, N_i)` of
    /// `L_i = (I + N_i) diag(exp(s_i))`, the precision being `L_i^T L_i`. Entry `(n, i)` is `-0.5 |L_i (x_n - mu_i)|^2`, plus
    /// `log det L_i - d/2 log(2 pi)` when `normalized`.
    pub fn gaussian_log_kernels(
        &mut self,
        x: Var,
        means: Var,
        chol: Var,
        normalized: bool,
        diagonal: bool,
    ) -> Result<Var> {
        let (n, m, d) = self.check_mixture_shapes("gaussian_log_kernels", x, means, chol)?;
        let view = CholeskyView::new(self.value(chol), diagonal);
        let out = kernels::log_kernels_forward(
            self.value(x).data(),
            self.value(means).data(),
            self.value(chol).data(),
            &view,
            n,
            m,
            d,
            normalized,
        );
        let out = Tensor::matrix(n, m, out)?;
        Ok(self.push(Op::GaussianLogKernels { x, means, chol, normalized, diagonal }, out, &[x, means, chol]))
    }

    /// Whitened offsets `L_i (x_n - mu_i)` stacked by component: row `i * n + k`.
    pub fn decorrelated_offsets(&mut self, x: Var, means: Var, chol: Var, diagonal: bool) -> Result<Var> {
        let (n, m, d) = self.check_mixture_shapes("decorrelated_offsets", x, means, chol)?;
        let view = CholeskyView::new(self.value(chol), diagonal);
        let out = kernels::offsets_forward(self.value(x).data(), self.value(means).data(), &view, n, m, d);
        let out = Tensor::matrix(m * n, d, out)?;
        Ok(self.push(Op::DecorrelatedOffsets { x, means, chol, diagonal }, out, &[x, means, chol]))
    }

    /// Block-wise product: rows `i*n..(i+1)*n` of `a` times `mats[i]` (`M x p x q`).
    pub fn block_matmul(&mut self, a: Var, mats: Var) -> Result<Var> {
        let (ta, tm) = (self.value(a), self.value(mats));
        let ok = ta.rank() == 2
            && tm.rank() == 3
            && tm.shape()[0] > 0
            && ta.rows() % tm.shape()[0] == 0
            && ta.cols() == tm.shape()[1];
        if !ok {
            return Err(shape_err(
                self.next_id(),
                "block_matmul",
                format!("{:?} by blocks {:?}", ta.shape(), tm.shape()),
            ));
        }
        let (m, p, q) = (tm.shape()[0], tm.shape()[1], tm.shape()[2]);
        let n = ta.rows() / m;
        let mut out = vec![0.0; m * n * q];
        for i in 0..m {
            gemm(
                n,
                p,
                q,
                &ta.data()[i * n * p..(i + 1) * n * p],
                false,
                &tm.data()[i * p * q..(i + 1) * p * q],
                false,
                &mut out[i * n * q..(i + 1) * n * q],
                0.0,
            );
        }
        let out = Tensor::matrix(m * n, q, out)?;
        Ok(self.push(Op::BlockMatMul(a, mats), out, &[a, mats]))
    }

    /// Block-wise dot products: `out[k, i] = h[i * n + k] . vecs[i]`, output `n x M`.
    pub fn block_row_dot(&mut self, h: Var, vecs: Var) -> Result<Var> {
        let (th, tv) = (self.value(h), self.value(vecs));
        let ok =
            th.rank() == 2 && tv.rank() == 2 && tv.rows() > 0 && th.rows() % tv.rows() == 0 && th.cols() == tv.cols();
        if !ok {
            return Err(shape_err(self.next_id(), "block_row_dot", format!("{:?} with {:?}", th.shape(), tv.shape())));
        }
        let (m, k) = (tv.rows(), tv.cols());
        let n = th.rows() / m;
        let mut col = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..m {
            gemm(n, k, 1, &th.data()[i * n * k..(i + 1) * n * k], false, tv.row(i), false, &mut col, 0.0);
            for (r, v) in col.iter().enumerate() {
                out[r * m + i] = *v;
            }
        }
        let out = Tensor::matrix(n, m, out)?;
        Ok(self.push(Op::BlockRowDot(h, vecs), out, &[h, vecs]))
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(self, output: Var, seed: Tensor) -> Result<Gradients> {
        let out_shape = self.value(output).shape().to_vec();
        if seed.len() != self.value(output).len() {
            return Err(Error::Shape(format!("seed {:?} does not match output {out_shape:?}", seed.shape())));
        }
        let seed = seed.reshape(out_shape)?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Only leaves and nodes that needed gradients keep them.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass from a one-element output with seed 1.
    pub fn backward_scalar(self, output: Var) -> Result<Gradients> {
        let shape = self.value(output).shape().to_vec();
        self.backward(output, Tensor::filled(&shape, 1.0))
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e += x;
                    }
                }
                slot @ None => {
                    let shape = val(v).shape().to_vec();
                    *slot = Some(t.reshape(shape).expect("gradient size matches"));
                }
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data).expect("shape");
        let gd = g.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), true, &mut ga, 0.0);
                    acc(*a, like(*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gd, false, &mut gb, 0.0);
                    acc(*b, like(*b, gb));
                }
            }
            Op::Add(a, b) => {
                acc(*a, like(*a, gd.to_vec()));
                acc(*b, like(*b, gd.to_vec()));
            }
            Op::Sub(a, b) => {
                acc(*a, like(*a, gd.to_vec()));
                acc(*b, like(*b, gd.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.wants(*a) {
                    acc(*a, like(*a, gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect()));
                }
                if self.wants(*b) {
                    acc(*b, like(*b, gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect()));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, like(*a, gd.to_vec()));
                if self.wants(*row) {
                    let c = val(*a).cols();
                    let mut gr = vec![0.0; c];
                    for chunk in gd.chunks(c) {
                        for (s, v) in gr.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    acc(*row, like(*row, gr));
                }
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (val(*a), val(*col));
                let c = ta.cols();
                if self.wants(*a) {
                    let mut ga = gd.to_vec();
                    for (r, chunk) in ga.chunks_mut(c).enumerate() {
                        let s = tc.data()[r];
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    acc(*a, like(*a, ga));
                }
                if self.wants(*col) {
                    let gc = gd
                        .chunks(c)
                        .zip(ta.data().chunks(c))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(*col, like(*col, gc));
                }
            }
            Op::Scale(a, c) => acc(*a, like(*a, gd.iter().map(|v| v * c).collect())),
            Op::AddScalar(a) => acc(*a, like(*a, gd.to_vec())),
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(*a, like(*a, gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Elu(a) => {
                let x = val(*a).data();
                acc(*a, like(*a, gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { g * x.exp() }).collect()));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, like(*a, gd.iter().zip(y).map(|(g, y)| g * y).collect()));
            }
            Op::Log(a) => {
                let x = val(*a).data();
                acc(*a, like(*a, gd.iter().zip(x).map(|(g, x)| g / x).collect()));
            }
            Op::LogSumExpRows(a) => {
                let ta = val(*a);
                let c = ta.cols();
                let lse = node.value.data();
                let mut ga = vec![0.0; ta.len()];
                for (r, chunk) in ga.chunks_mut(c).enumerate() {
                    let xs = &ta.data()[r * c..(r + 1) * c];
                    for (o, x) in chunk.iter_mut().zip(xs) {
                        *o = gd[r] * (x - lse[r]).exp();
                    }
                }
                acc(*a, like(*a, ga));
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut ga = vec![0.0; y.len()];
                for ((o, yr), gr) in ga.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, y), g) in o.iter_mut().zip(yr).zip(gr) {
                        *o = y * (g - dot);
                    }
                }
                acc(*a, like(*a, ga));
            }
            Op::LogSoftmaxRows(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut ga = vec![0.0; y.len()];
                for ((o, yr), gr) in ga.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, y), g) in o.iter_mut().zip(yr).zip(gr) {
                        *o = g - y.exp() * total;
                    }
                }
                acc(*a, like(*a, ga));
            }
            Op::SumRows(a) => {
                let c = val(*a).cols();
                let ga = gd.iter().flat_map(|&g| std::iter::repeat_n(g, c)).collect();
                acc(*a, like(*a, ga));
            }
            Op::Sum(a) => acc(*a, like(*a, vec![gd[0]; val(*a).len()])),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, like(*a, vec![gd[0] / n as f64; n]));
            }
            Op::SliceRows(a, start) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                ga[start * c..start * c + gd.len()].copy_from_slice(gd);
                acc(*a, like(*a, ga));
            }
            Op::SliceCols(a, start) => {
                let ta = val(*a);
                let c = ta.cols();
                let w = node.value.cols();
                let mut ga = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    ga[r * c + start..r * c + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                acc(*a, like(*a, ga));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    acc(*p, like(*p, gd[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::Reshape(a) => acc(*a, like(*a, gd.to_vec())),
            Op::GaussianLogKernels { x, means, chol, normalized, diagonal } => {
                let (tx, tm, tc) = (val(*x), val(*means), val(*chol));
                let (n, m, d) = (tx.rows(), tm.rows(), tx.cols());
                let view = CholeskyView::new(tc, *diagonal);
                let (gx, gm, gc) = kernels::log_kernels_backward(
                    tx.data(),
                    tm.data(),
                    tc.data(),
                    &view,
                    gd,
                    n,
                    m,
                    d,
                    *normalized,
                    *diagonal,
                );
                acc(*x, like(*x, gx));
                acc(*means, like(*means, gm));
                acc(*chol, like(*chol, gc));
            }
            Op::DecorrelatedOffsets { x, means, chol, diagonal } => {
                let (tx, tm, tc) = (val(*x), val(*means), val(*chol));
                let (n, m, d) = (tx.rows(), tm.rows(), tx.cols());
                let view = CholeskyView::new(tc, *diagonal);
                let (gx, gm, gc) =
                    kernels::offsets_backward(tx.data(), tm.data(), tc.data(), &view, gd, n, m, d, *diagonal);
                acc(*x, like(*x, gx));
                acc(*means, like(*means, gm));
                acc(*chol, like(*chol, gc));
            }
            Op::BlockMatMul(a, mats) => {
                let (ta, tm) = (val(*a), val(*mats));
                let (m, p, q) = (tm.shape()[0], tm.shape()[1], tm.shape()[2]);
                let n = ta.rows() / m;
                if self.wants(*a) {
                    let mut ga = vec![0.0; ta.len()];
                    for i in 0..m {
                        gemm(
                            n,
                            q,
                            p,
                            &gd[i * n * q..(i + 1) * n * q],
                            false,
                            &tm.data()[i * p * q..(i + 1) * p * q],
                            true,
                            &mut ga[i * n * p..(i + 1) * n * p],
                            0.0,
                        );
                    }
                    acc(*a, like(*a, ga));
                }
                if self.wants(*mats) {
                    let mut gm = vec![0.0; tm.len()];
                    for i in 0..m {
                        gemm(
                            p,
                            n,
                            q,
                            &ta.data()[i * n * p..(i + 1) * n * p],
                            true,
                            &gd[i * n * q..(i + 1) * n * q],
                            false,
                            &mut gm[i * p * q..(i + 1) * p * q],
                            0.0,
                        );
                    }
                    acc(*mats, like(*mats, gm));
                }
            }
            Op::BlockRowDot(h, vecs) => {
                let (th, tv) = (val(*h), val(*vecs));
                let (m, k) = (tv.rows(), tv.cols());
                let n = th.rows() / m;
                let col = |i: usize| -> Vec<f64> { (0..n).map(|r| gd[r * m + i]).collect() };
                if self.wants(*h) {
                    let mut gh = vec![0.0; th.len()];
                    for i in 0..m {
                        let gcol = col(i);
                        let v = tv.row(i);
                        for (r, g) in gcol.iter().enumerate() {
                            let row = &mut gh[(i * n + r) * k..(i * n + r + 1) * k];
                            for (o, vj) in row.iter_mut().zip(v) {
                                *o = g * vj;
                            }
                        }
                    }
                    acc(*h, like(*h, gh));
                }
                if self.wants(*vecs) {
                    let mut gv = vec![0.0; tv.len()];
                    for i in 0..m {
                        let gcol = col(i);
                        gemm(
                            k,
                            n,
                            1,
                            &th.data()[i * n * k..(i + 1) * n * k],
                            true,
                            &gcol,
                            false,
                            &mut gv[i * k..(i + 1) * k],
                            0.0,
                        );
                    }
                    acc(*vecs, like(*vecs, gv));
                }
            }
        }
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}
