//! Define-by-run computation record with reverse-mode gradients.
//!
//! A [`Tape`] is built fresh for every forward pass. Operations append a node
//! holding the output value and the rule needed to push gradients back to its
//! inputs; since a node can only reference nodes created before it, the node
//! list is already in topological order and [`Tape::backward`] is a single
//! reverse sweep.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBroadcast(Var, Var),
    MulColBroadcast(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MeanLastAxis(Var),
    Min(Var, Var),
    TraceExpm { input: Var, expm: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    LogSumExpNegRows { input: Var, mask: Option<Vec<bool>>, t: f64 },
    PairwiseSub(Var, Var),
    PathMin(Var),
    SelectCols(Var, Vec<usize>),
    ConcatRows(Var, Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
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

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        check_finite("constant", value.data())?;
        self.nodes.push(Node { value: Tensor::from_parts(value.shape().to_vec(), value.into_data()), op: Op::Leaf, needs_grad: false });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a trainable leaf; its gradient is available after [`Tape::backward`].
    pub fn param(&mut self, value: &Tensor) -> Result<Var> {
        check_finite("param", value.data())?;
        self.nodes.push(Node {
            value: Tensor::from_parts(value.shape().to_vec(), value.data().to_vec()),
            op: Op::Leaf,
            needs_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, p) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] * [{k2}x{p}]")));
        }
        let out = kernels::matmul(self.value(a).data(), m, k, self.value(b).data(), p);
        self.push("matmul", Tensor::from_parts(vec![m, p], out), Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("hadamard", a, b, |x, y| x * y)?;
        self.push("hadamard", v, Op::Hadamard(a, b), &[a, b])
    }

    /// Elementwise minimum. The gradient goes to the smaller input; ties go to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("min", a, b, f64::min)?;
        self.push("min", v, Op::Min(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |x| x * c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |x| x + c);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    /// Adds vector `v[c]` to every row of matrix `m[r×c]`.
    pub fn add_row_broadcast(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = matrix_dims("add_row_broadcast", self.value(m))?;
        if self.value(v).len() != c {
            return Err(Error::dim("add_row_broadcast", format!("[{r}x{c}] + vector of {}", self.value(v).len())));
        }
        let (tm, tv) = (self.value(m).data(), self.value(v).data());
        let data = (0..r * c).map(|idx| tm[idx] + tv[idx % c]).collect();
        self.push("add_row_broadcast", Tensor::from_parts(vec![r, c], data), Op::AddRowBroadcast(m, v), &[m, v])
    }

    /// Multiplies row `i` of matrix `m[r×c]` by `v[i]`.
    pub fn mul_col_broadcast(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = matrix_dims("mul_col_broadcast", self.value(m))?;
        if self.value(v).len() != r {
            return Err(Error::dim("mul_col_broadcast", format!("[{r}x{c}] * vector of {}", self.value(v).len())));
        }
        let (tm, tv) = (self.value(m).data(), self.value(v).data());
        let data = (0..r * c).map(|idx| tm[idx] * tv[idx / c]).collect();
        self.push("mul_col_broadcast", Tensor::from_parts(vec![r, c], data), Op::MulColBroadcast(m, v), &[m, v])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::abs);
        self.push("abs", v, Op::Abs(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean over the last axis: `[.., k] -> [..]`.
    pub fn mean_last_axis(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let k = t.cols();
        if t.shape().is_empty() || k == 0 {
            return Err(Error::dim("mean_last_axis", format!("shape {:?}", t.shape())));
        }
        let shape = t.shape()[..t.shape().len() - 1].to_vec();
        let data = t.data().chunks(k).map(|r| r.iter().sum::<f64>() / k as f64).collect();
        self.push("mean_last_axis", Tensor::from_parts(shape, data), Op::MeanLastAxis(a), &[a])
    }

    /// `tr(exp(b))` for square `b`.
    pub fn trace_expm(&mut self, b: Var) -> Result<Var> {
        let (n, n2) = matrix_dims("trace_expm", self.value(b))?;
        if n != n2 {
            return Err(Error::dim("trace_expm", format!("non-square [{n}x{n2}]")));
        }
        let expm = kernels::expm(self.value(b).data(), n);
        let tr = (0..n).map(|i| expm[i * n + i]).sum();
        self.push("trace_expm", Tensor::scalar(tr), Op::TraceExpm { input: b, expm }, &[b])
    }

    /// Mean over the batch of `w[y] * -log softmax(logits)[y]`.
    ///
    /// Labels are zero-based class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let (b, c) = matrix_dims("softmax_cross_entropy", self.value(logits))?;
        if labels.len() != b || weights.len() != c {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("[{b}x{c}] logits with {} labels and {} weights", labels.len(), weights.len()),
            ));
        }
        if b == 0 {
            return Err(Error::dim("softmax_cross_entropy", "empty batch"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Parameter(format!("label {y} out of range for {c} classes")));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Parameter("class weights must be positive".into()));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            for j in 0..c {
                probs[i * c + j] = (row[j] - log_z).exp();
            }
            total += weights[y] * (log_z - row[y]);
        }
        let loss = total / b as f64;
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), weights: weights.to_vec(), probs };
        self.push("softmax_cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Row-wise `-t * ln(sum_k exp(-a[r,k] / t))` over the entries selected
    /// by `mask` (all entries when `None`). A row with nothing selected
    /// evaluates to 1, the empty conjunction.
    pub fn logsumexp_neg_rows(&mut self, a: Var, mask: Option<Vec<bool>>, t: f64) -> Result<Var> {
        if !(t > 0.0) {
            return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
        }
        let ta = self.value(a);
        let k = ta.cols();
        if ta.shape().is_empty() || k == 0 {
            return Err(Error::dim("logsumexp_neg_rows", format!("shape {:?}", ta.shape())));
        }
        if let Some(m) = &mask {
            if m.len() != ta.len() {
                return Err(Error::dim("logsumexp_neg_rows", format!("mask of {} for {} values", m.len(), ta.len())));
            }
        }
        let rows = ta.len() / k;
        let shape = ta.shape()[..ta.shape().len() - 1].to_vec();
        let data = ta.data();
        let mut out = vec![0.0; rows];
        kernels::for_each_row(&mut out, 1, |r, o| {
            let vals = &data[r * k..(r + 1) * k];
            let sel = |j: usize| mask.as_ref().is_none_or(|m| m[r * k + j]);
            o[0] = soft_min((0..k).filter(|&j| sel(j)).map(|j| vals[j]), t);
        });
        self.push("logsumexp_neg_rows", Tensor::from_parts(shape, out), Op::LogSumExpNegRows { input: a, mask, t }, &[a])
    }

    /// Scalar `-t * ln(sum exp(-a / t))` over every entry of `a`.
    pub fn logsumexp_neg(&mut self, a: Var, t: f64) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::dim("logsumexp_neg", "empty tensor"));
        }
        let flat = self.reshape(a, vec![1, n])?;
        let rows = self.logsumexp_neg_rows(flat, None, t)?;
        self.reshape(rows, vec![])
    }

    /// All pairwise row differences: `out[i*q + j, l] = a[i, l] - b[j, l]`.
    pub fn pairwise_sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = matrix_dims("pairwise_sub", self.value(a))?;
        let (q, d2) = matrix_dims("pairwise_sub", self.value(b))?;
        if d != d2 {
            return Err(Error::dim("pairwise_sub", format!("widths {d} and {d2}")));
        }
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * q * d];
        kernels::for_each_row(&mut out, d, |row, o| {
            let (i, j) = (row / q, row % q);
            let (ra, rb) = (&ta[i * d..(i + 1) * d], &tb[j * d..(j + 1) * d]);
            for l in 0..d {
                o[l] = ra[l] - rb[l];
            }
        });
        self.push("pairwise_sub", Tensor::from_parts(vec![m * q, d], out), Op::PairwiseSub(a, b), &[a, b])
    }

    /// Two-step path minima of a square matrix:
    /// `out[i*n + j, g] = min(w[i, g], w[g, j])`. Ties route the gradient to `w[i, g]`.
    pub fn path_min(&mut self, w: Var) -> Result<Var> {
        let (n, n2) = matrix_dims("path_min", self.value(w))?;
        if n != n2 {
            return Err(Error::dim("path_min", format!("non-square [{n}x{n2}]")));
        }
        let tw = self.value(w).data();
        let mut out = vec![0.0; n * n * n];
        kernels::for_each_row(&mut out, n, |row, o| {
            let (i, j) = (row / n, row % n);
            for g in 0..n {
                o[g] = tw[i * n + g].min(tw[g * n + j]);
            }
        });
        self.push("path_min", Tensor::from_parts(vec![n * n, n], out), Op::PathMin(w), &[w])
    }

    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = matrix_dims("select_cols", self.value(a))?;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::dim("select_cols", format!("column {bad} of {c}")));
        }
        let ta = self.value(a).data();
        let data = (0..r).flat_map(|i| cols.iter().map(move |&j| ta[i * c + j])).collect();
        self.push("select_cols", Tensor::from_parts(vec![r, cols.len()], data), Op::SelectCols(a, cols.to_vec()), &[a])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r1, c1) = matrix_dims("concat_rows", self.value(a))?;
        let (r2, c2) = matrix_dims("concat_rows", self.value(b))?;
        if c1 != c2 {
            return Err(Error::dim("concat_rows", format!("widths {c1} and {c2}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        self.push("concat_rows", Tensor::from_parts(vec![r1 + r2, c1], data), Op::ConcatRows(a, b), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::new(shape, t.data().to_vec())
            .map_err(|_| Error::dim("reshape", format!("{:?} has {} values", t.shape(), t.len())))?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 || lt.shape().iter().any(|&d| d != 1) {
            return Err(Error::dim("backward", format!("loss must be scalar, got shape {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| &nodes[v.0].value;
        let out = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let p = val(*b).cols();
                if wants(*a) {
                    let bt = kernels::transpose(val(*b).data(), k, p);
                    let ga = kernels::matmul(g, m, p, &bt, k);
                    accumulate(&mut grads[a.0], m * k, |s| s.iter_mut().zip(&ga).for_each(|(s, d)| *s += d));
                }
                if wants(*b) {
                    let at = kernels::transpose(val(*a).data(), m, k);
                    let gb = kernels::matmul(&at, k, m, g, p);
                    accumulate(&mut grads[b.0], k * p, |s| s.iter_mut().zip(&gb).for_each(|(s, d)| *s += d));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |s| s.iter_mut().zip(g).for_each(|(s, d)| *s += d));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.len(), |s| s.iter_mut().zip(g).for_each(|(s, d)| *s += sign * d));
                }
            }
            Op::Hadamard(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * db[i];
                        }
                    });
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * da[i];
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.len(), |s| s.iter_mut().zip(g).for_each(|(s, d)| *s += c * d));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(&mut grads[a.0], g.len(), |s| s.iter_mut().zip(g).for_each(|(s, d)| *s += d));
            }
            Op::AddRowBroadcast(m, v) => {
                let c = out.cols();
                if wants(*m) {
                    accumulate(&mut grads[m.0], g.len(), |s| s.iter_mut().zip(g).for_each(|(s, d)| *s += d));
                }
                if wants(*v) {
                    accumulate(&mut grads[v.0], c, |s| {
                        for (idx, d) in g.iter().enumerate() {
                            s[idx % c] += d;
                        }
                    });
                }
            }
            Op::MulColBroadcast(m, v) => {
                let (r, c) = (out.rows(), out.cols());
                let (dm, dv) = (val(*m).data(), val(*v).data());
                if wants(*m) {
                    accumulate(&mut grads[m.0], g.len(), |s| {
                        for idx in 0..g.len() {
                            s[idx] += g[idx] * dv[idx / c];
                        }
                    });
                }
                if wants(*v) {
                    accumulate(&mut grads[v.0], r, |s| {
                        for idx in 0..g.len() {
                            s[idx / c] += g[idx] * dm[idx];
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                accumulate(&mut grads[a.0], g.len(), |s| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                accumulate(&mut grads[a.0], g.len(), |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let x = val(*a).data();
                accumulate(&mut grads[a.0], g.len(), |s| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        } else if x[i] < 0.0 {
                            s[i] -= g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                accumulate(&mut grads[a.0], n, |s| s.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let d = g[0] / n as f64;
                accumulate(&mut grads[a.0], n, |s| s.iter_mut().for_each(|s| *s += d));
            }
            Op::MeanLastAxis(a) => {
                let k = val(*a).cols();
                let n = val(*a).len();
                accumulate(&mut grads[a.0], n, |s| {
                    for (idx, s) in s.iter_mut().enumerate() {
                        *s += g[idx / k] / k as f64;
                    }
                });
            }
            Op::Min(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |s| {
                        for i in 0..g.len() {
                            if da[i] <= db[i] {
                                s[i] += g[i];
                            }
                        }
                    });
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.len(), |s| {
                        for i in 0..g.len() {
                            if da[i] > db[i] {
                                s[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::TraceExpm { input, expm } => {
                let n = val(*input).rows();
                accumulate(&mut grads[input.0], n * n, |s| {
                    for i in 0..n {
                        for j in 0..n {
                            s[i * n + j] += g[0] * expm[j * n + i];
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, weights, probs } => {
                let c = val(*logits).cols();
                let b = labels.len() as f64;
                accumulate(&mut grads[logits.0], probs.len(), |s| {
                    for (i, &y) in labels.iter().enumerate() {
                        let scale = g[0] * weights[y] / b;
                        for j in 0..c {
                            let target = if j == y { 1.0 } else { 0.0 };
                            s[i * c + j] += scale * (probs[i * c + j] - target);
                        }
                    }
                });
            }
            Op::LogSumExpNegRows { input, mask, t } => {
                let x = val(*input).data();
                let k = val(*input).cols();
                let o = out.data();
                accumulate(&mut grads[input.0], x.len(), |s| {
                    for (r, &or) in o.iter().enumerate() {
                        for j in 0..k {
                            let idx = r * k + j;
                            if mask.as_ref().is_none_or(|m| m[idx]) {
                                s[idx] += g[r] * ((or - x[idx]) / t).exp();
                            }
                        }
                    }
                });
            }
            Op::PairwiseSub(a, b) => {
                let (m, d) = (val(*a).rows(), val(*a).cols());
                let q = val(*b).rows();
                if wants(*a) {
                    accumulate(&mut grads[a.0], m * d, |s| {
                        for row in 0..m * q {
                            let i = row / q;
                            for l in 0..d {
                                s[i * d + l] += g[row * d + l];
                            }
                        }
                    });
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], q * d, |s| {
                        for row in 0..m * q {
                            let j = row % q;
                            for l in 0..d {
                                s[j * d + l] -= g[row * d + l];
                            }
                        }
                    });
                }
            }
            Op::PathMin(w) => {
                let n = val(*w).rows();
                let tw = val(*w).data();
                accumulate(&mut grads[w.0], n * n, |s| {
                    for i in 0..n {
                        for j in 0..n {
                            let base = (i * n + j) * n;
                            for gm in 0..n {
                                let (left, right) = (i * n + gm, gm * n + j);
                                if tw[left] <= tw[right] {
                                    s[left] += g[base + gm];
                                } else {
                                    s[right] += g[base + gm];
                                }
                            }
                        }
                    }
                });
            }
            Op::SelectCols(a, cols) => {
                let c = val(*a).cols();
                let w = cols.len();
                let n = val(*a).len();
                accumulate(&mut grads[a.0], n, |s| {
                    for (idx, d) in g.iter().enumerate() {
                        let (i, jj) = (idx / w, idx % w);
                        s[i * c + cols[jj]] += d;
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let na = val(*a).len();
                if wants(*a) {
                    accumulate(&mut grads[a.0], na, |s| s.iter_mut().zip(&g[..na]).for_each(|(s, d)| *s += d));
                }
                if wants(*b) {
                    let nb = val(*b).len();
                    accumulate(&mut grads[b.0], nb, |s| s.iter_mut().zip(&g[na..]).for_each(|(s, d)| *s += d));
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-t * ln(sum exp(-v / t))`, stabilised by the minimum; 1 for an empty input.
pub(crate) fn soft_min(values: impl Iterator<Item = f64> + Clone, t: f64) -> f64 {
    let Some(lo) = values.clone().reduce(f64::min) else {
        return 1.0;
    };
    let s: f64 = values.map(|v| (-(v - lo) / t).exp()).sum();
    lo - t * s.ln()
}
