//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value and the handles of its
//! inputs. [`Tape::backward`] walks the nodes in reverse and deposits
//! gradients; named parameter leaves are collected into [`Gradients`].
//!
//! All ops work on rank-2 tensors. `add` and `mul` broadcast their right
//! operand over rows and/or columns when its extent along that axis is 1.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, sigmoid, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Mean { x: Var, axis: usize },
    Sum(Var),
    SumN(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { x: Var, targets: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Transpose(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of forward operations. Confined to one thread of control; build a
/// fresh tape per forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    per_node: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a named parameter. Parameters the loss does not depend on
    /// have an all-zero gradient.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Gradient with respect to any node.
    pub fn of(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.per_node[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::invalid(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        ))
    }
}

/// Broadcast-compatible right operand: each dimension equals lhs or is 1.
fn check_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    check_matrix(op, a)?;
    check_matrix(op, b)?;
    let ok_r = b.rows() == a.rows() || b.rows() == 1;
    let ok_c = b.cols() == a.cols() || b.cols() == 1;
    if ok_r && ok_c {
        Ok(())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `x (m x k) * w^T` where `w` is `n x k`.
fn matmul_bt(x: &[f64], w: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let xrow = &x[i * k..(i + 1) * k];
        for j in 0..n {
            let wrow = &w[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (a, b) in xrow.iter().zip(wrow) {
                s += a * b;
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn mat(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input; gradients flow into it but it is not reported as a parameter.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(name.into()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.mat(a), self.mat(b));
        check_matrix("matmul", ta)?;
        check_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Affine map `x W^T + b` with `W: out x in` and optional `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.mat(x), self.mat(w));
        check_matrix("linear", tx)?;
        check_matrix("linear", tw)?;
        if tx.cols() != tw.cols() {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        let (m, k, n) = (tx.rows(), tx.cols(), tw.rows());
        let mut out = matmul_bt(tx.data(), tw.data(), m, k, n);
        if let Some(b) = b {
            let tb = self.mat(b);
            if tb.shape() != [1, n] {
                return Err(Error::shape("linear bias", &[1, n], tb.shape()));
            }
            for i in 0..m {
                for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    fn broadcast_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.mat(a), self.mat(b));
        check_broadcast(op, ta, tb)?;
        let (m, n) = (ta.rows(), ta.cols());
        let (br, bc) = (tb.rows(), tb.cols());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let bi = if br == 1 { 0 } else { i };
            for j in 0..n {
                let bj = if bc == 1 { 0 } else { j };
                out.push(f(ta.data()[i * n + j], tb.data()[bi * bc + bj]));
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.mat(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.mat(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.mat(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.mat(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.mat(a);
        check_matrix("softmax", ta)?;
        let n = ta.cols();
        let out: Vec<f64> = ta
            .data()
            .chunks(n)
            .flat_map(crate::tensor::softmax)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(a)))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.mat(a);
        check_matrix("log_softmax", ta)?;
        let n = ta.cols();
        let out: Vec<f64> = ta
            .data()
            .chunks(n)
            .flat_map(|row| {
                let lse = log_sum_exp(row);
                row.iter().map(move |x| x - lse)
            })
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LogSoftmax(a)))
    }

    /// Concatenate along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.mat(inputs[0]).clone();
        check_matrix("concat", &first)?;
        let t = match axis {
            0 => {
                let mut rows = 0;
                let mut data = Vec::new();
                for &v in inputs {
                    let t = self.mat(v);
                    check_matrix("concat", t)?;
                    if t.cols() != first.cols() {
                        return Err(Error::shape("concat", first.shape(), t.shape()));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, first.cols(), data)?
            }
            1 => {
                let m = first.rows();
                let mut cols = 0;
                for &v in inputs {
                    let t = self.mat(v);
                    check_matrix("concat", t)?;
                    if t.rows() != m {
                        return Err(Error::shape("concat", first.shape(), t.shape()));
                    }
                    cols += t.cols();
                }
                let mut data = Vec::with_capacity(m * cols);
                for i in 0..m {
                    for &v in inputs {
                        data.extend_from_slice(self.mat(v).row_slice(i));
                    }
                }
                Tensor::matrix(m, cols, data)?
            }
            _ => {
                return Err(Error::invalid(
                    "concat",
                    format!("axis {axis} out of range"),
                ))
            }
        };
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Mean over rows (`axis = 0`, giving `1 x n`) or columns (`axis = 1`, giving `m x 1`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.mat(x);
        check_matrix("mean", t)?;
        let (m, n) = (t.rows(), t.cols());
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; n];
                for i in 0..m {
                    for (a, v) in acc.iter_mut().zip(t.row_slice(i)) {
                        *a += v;
                    }
                }
                Tensor::matrix(1, n, acc.into_iter().map(|a| a / m as f64).collect())?
            }
            1 => Tensor::matrix(
                m,
                1,
                (0..m)
                    .map(|i| t.row_slice(i).iter().sum::<f64>() / n as f64)
                    .collect(),
            )?,
            _ => return Err(Error::invalid("mean", format!("axis {axis} out of range"))),
        };
        Ok(self.push(out, Op::Mean { x, axis }))
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.mat(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Elementwise sum of equally shaped tensors, accumulated left to right.
    pub fn sum_n(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::invalid("sum_n", "no inputs"));
        };
        let mut acc = self.mat(first).clone();
        for &v in &inputs[1..] {
            let t = self.mat(v);
            if t.shape() != acc.shape() {
                return Err(Error::shape("sum_n", acc.shape(), t.shape()));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        Ok(self.push(acc, Op::SumN(inputs.to_vec())))
    }

    /// `weights (1 x K) * rows (K x D)`: a convex combination when the weights
    /// are a distribution.
    pub fn weighted_sum(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (tw, tr) = (self.mat(weights), self.mat(rows));
        if !tw.is_matrix() || tw.rows() != 1 || !tr.is_matrix() || tw.cols() != tr.rows() {
            return Err(Error::shape("weighted_sum", tw.shape(), tr.shape()));
        }
        self.matmul(weights, rows)
    }

    /// Row gather: output row `r` is `x[idx[r]]`. Used for embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.mat(x);
        check_matrix("gather_rows", t)?;
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for shape {:?}", t.shape()),
            ));
        }
        let n = t.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::matrix(idx.len(), n, data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Row scatter-add into `n_out` rows: `out[targets[r]] += x[r]`, in row order.
    pub fn scatter_add_rows(&mut self, x: Var, targets: &[usize], n_out: usize) -> Result<Var> {
        let t = self.mat(x);
        check_matrix("scatter_add_rows", t)?;
        if targets.len() != t.rows() {
            return Err(Error::shape(
                "scatter_add_rows",
                t.shape(),
                &[targets.len()],
            ));
        }
        if n_out == 0 || targets.iter().any(|&r| r >= n_out) {
            return Err(Error::invalid(
                "scatter_add_rows",
                "target row out of range",
            ));
        }
        let n = t.cols();
        let mut data = vec![0.0; n_out * n];
        for (r, &dst) in targets.iter().enumerate() {
            for (o, v) in data[dst * n..(dst + 1) * n].iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        let out = Tensor::matrix(n_out, n, data)?;
        Ok(self.push(
            out,
            Op::ScatterAddRows {
                x,
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.mat(x);
        check_matrix("slice_cols", t)?;
        if len == 0 || start + len > t.cols() {
            return Err(Error::invalid(
                "slice_cols",
                format!(
                    "columns {start}..{} out of range for shape {:?}",
                    start + len,
                    t.shape()
                ),
            ));
        }
        let data: Vec<f64> = (0..t.rows())
            .flat_map(|i| t.row_slice(i)[start..start + len].to_vec())
            .collect();
        let out = Tensor::matrix(t.rows(), len, data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.mat(x);
        check_matrix("transpose", t)?;
        let (m, n) = (t.rows(), t.cols());
        let out = Tensor::matrix(n, m, transpose_raw(t.data(), m, n))?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    /// Summed cross-entropy of row-wise logits against one target index per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.mat(logits);
        check_matrix("cross_entropy", t)?;
        if targets.len() != t.rows() {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = t.row_slice(i);
            if y >= row.len() {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("target {y} out of range for {} classes", row.len()),
                ));
            }
            loss += log_sum_exp(row) - row[y];
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Propagate `d loss / d node` for every node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.mat(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n_nodes = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n_nodes).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.mat(*a), self.mat(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    // dA = G B^T, dB = A^T G
                    let da = matmul_bt(&g, tb.data(), m, n, k);
                    let at = transpose_raw(ta.data(), m, k);
                    let db = matmul_raw(&at, &g, k, m, n);
                    accumulate(&mut grads[a.0], m * k, |s| add_into(s, &da));
                    accumulate(&mut grads[b.0], k * n, |s| add_into(s, &db));
                }
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (self.mat(*x), self.mat(*w));
                    let (m, k, n) = (tx.rows(), tx.cols(), tw.rows());
                    // y = x W^T: dx = G W, dW = G^T x
                    let dx = matmul_raw(&g, tw.data(), m, n, k);
                    let gt = transpose_raw(&g, m, n);
                    let dw = matmul_raw(&gt, tx.data(), n, m, k);
                    accumulate(&mut grads[x.0], m * k, |s| add_into(s, &dx));
                    accumulate(&mut grads[w.0], n * k, |s| add_into(s, &dw));
                    if let Some(b) = b {
                        accumulate(&mut grads[b.0], n, |s| {
                            for i in 0..m {
                                add_into(s, &g[i * n..(i + 1) * n]);
                            }
                        });
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.len(), |s| add_into(s, &g));
                    let tb = self.mat(*b);
                    let db = reduce_broadcast(
                        &g,
                        out.rows(),
                        out.cols(),
                        tb.rows(),
                        tb.cols(),
                        |_, _| 1.0,
                    );
                    accumulate(&mut grads[b.0], tb.len(), |s| add_into(s, &db));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.mat(*a), self.mat(*b));
                    let (m, n) = (out.rows(), out.cols());
                    let (br, bc) = (tb.rows(), tb.cols());
                    let bval = |i: usize, j: usize| {
                        let bi = if br == 1 { 0 } else { i };
                        let bj = if bc == 1 { 0 } else { j };
                        tb.data()[bi * bc + bj]
                    };
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[i * n + j] * bval(i, j);
                        }
                    }
                    let db = reduce_broadcast(&g, m, n, br, bc, |i, j| ta.data()[i * n + j]);
                    accumulate(&mut grads[a.0], m * n, |s| add_into(s, &da));
                    accumulate(&mut grads[b.0], tb.len(), |s| add_into(s, &db));
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads[a.0], g.len(), |s| {
                        for (x, gv) in s.iter_mut().zip(&g) {
                            *x += c * gv;
                        }
                    });
                }
                Op::Relu(a) => {
                    let ta = self.mat(*a);
                    accumulate(&mut grads[a.0], g.len(), |s| {
                        for ((x, gv), inp) in s.iter_mut().zip(&g).zip(ta.data()) {
                            if *inp > 0.0 {
                                *x += gv;
                            }
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    accumulate(&mut grads[a.0], g.len(), |s| {
                        for ((x, gv), y) in s.iter_mut().zip(&g).zip(out.data()) {
                            *x += gv * y * (1.0 - y);
                        }
                    });
                }
                Op::Tanh(a) => {
                    accumulate(&mut grads[a.0], g.len(), |s| {
                        for ((x, gv), y) in s.iter_mut().zip(&g).zip(out.data()) {
                            *x += gv * (1.0 - y * y);
                        }
                    });
                }
                Op::Softmax(a) => {
                    let n = out.cols();
                    accumulate(&mut grads[a.0], g.len(), |s| {
                        for ((srow, grow), yrow) in
                            s.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((x, gv), y) in srow.iter_mut().zip(grow).zip(yrow) {
                                *x += y * (gv - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let n = out.cols();
                    accumulate(&mut grads[a.0], g.len(), |s| {
                        for ((srow, grow), yrow) in
                            s.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n))
                        {
                            let gsum: f64 = grow.iter().sum();
                            for ((x, gv), y) in srow.iter_mut().zip(grow).zip(yrow) {
                                *x += gv - y.exp() * gsum;
                            }
                        }
                    });
                }
                Op::Concat { inputs, axis } => {
                    let n = out.cols();
                    let mut row_off = 0;
                    let mut col_off = 0;
                    for &v in inputs {
                        let t = self.mat(v);
                        let (r, c) = (t.rows(), t.cols());
                        let mut piece = Vec::with_capacity(r * c);
                        if *axis == 0 {
                            piece.extend_from_slice(&g[row_off * n..(row_off + r) * n]);
                            row_off += r;
                        } else {
                            for i in 0..r {
                                piece.extend_from_slice(&g[i * n + col_off..i * n + col_off + c]);
                            }
                            col_off += c;
                        }
                        accumulate(&mut grads[v.0], r * c, |s| add_into(s, &piece));
                    }
                }
                Op::Mean { x, axis } => {
                    let t = self.mat(*x);
                    let (m, n) = (t.rows(), t.cols());
                    accumulate(&mut grads[x.0], m * n, |s| {
                        for i in 0..m {
                            for j in 0..n {
                                s[i * n + j] += if *axis == 0 {
                                    g[j] / m as f64
                                } else {
                                    g[i] / n as f64
                                };
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let len = self.mat(*x).len();
                    accumulate(&mut grads[x.0], len, |s| {
                        for v in s.iter_mut() {
                            *v += g[0];
                        }
                    });
                }
                Op::SumN(inputs) => {
                    for &v in inputs {
                        accumulate(&mut grads[v.0], g.len(), |s| add_into(s, &g));
                    }
                }
                Op::GatherRows { x, idx } => {
                    let t = self.mat(*x);
                    let n = t.cols();
                    accumulate(&mut grads[x.0], t.len(), |s| {
                        for (r, &src) in idx.iter().enumerate() {
                            add_into(&mut s[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                        }
                    });
                }
                Op::ScatterAddRows { x, targets } => {
                    let t = self.mat(*x);
                    let n = t.cols();
                    accumulate(&mut grads[x.0], t.len(), |s| {
                        for (r, &dst) in targets.iter().enumerate() {
                            add_into(&mut s[r * n..(r + 1) * n], &g[dst * n..(dst + 1) * n]);
                        }
                    });
                }
                Op::SliceCols { x, start } => {
                    let t = self.mat(*x);
                    let (m, n) = (t.rows(), t.cols());
                    let len = out.cols();
                    accumulate(&mut grads[x.0], m * n, |s| {
                        for i in 0..m {
                            add_into(
                                &mut s[i * n + start..i * n + start + len],
                                &g[i * len..(i + 1) * len],
                            );
                        }
                    });
                }
                Op::Transpose(x) => {
                    let (m, n) = (out.rows(), out.cols());
                    let gt = transpose_raw(&g, m, n);
                    accumulate(&mut grads[x.0], m * n, |s| add_into(s, &gt));
                }
                Op::CrossEntropy { logits, targets } => {
                    let t = self.mat(*logits);
                    let n = t.cols();
                    accumulate(&mut grads[logits.0], t.len(), |s| {
                        for (i, &y) in targets.iter().enumerate() {
                            let p = crate::tensor::softmax(t.row_slice(i));
                            for (j, pj) in p.into_iter().enumerate() {
                                let ind = if j == y { 1.0 } else { 0.0 };
                                s[i * n + j] += g[0] * (pj - ind);
                            }
                        }
                    });
                }
            }
            grads[idx] = Some(g);
        }

        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let shape = node.value.shape().to_vec();
                let g = match &grads[i] {
                    Some(g) => Tensor::new(shape, g.clone())?,
                    None => Tensor::zeros(&shape),
                };
                match params.get_mut(name) {
                    Some(acc) if acc.shape() == g.shape() => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    Some(acc) => {
                        return Err(Error::shape(
                            "backward: parameter registered twice",
                            acc.shape(),
                            g.shape(),
                        ))
                    }
                    None => {
                        params.insert(name.clone(), g);
                    }
                }
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            per_node: grads,
            shapes,
            params,
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Sum `g[i,j] * factor(i,j)` down to a `br x bc` broadcast operand.
fn reduce_broadcast(
    g: &[f64],
    m: usize,
    n: usize,
    br: usize,
    bc: usize,
    factor: impl Fn(usize, usize) -> f64,
) -> Vec<f64> {
    let mut out = vec![0.0; br * bc];
    for i in 0..m {
        let bi = if br == 1 { 0 } else { i };
        for j in 0..n {
            let bj = if bc == 1 { 0 } else { j };
            out[bi * bc + bj] += g[i * n + j] * factor(i, j);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(3));
        let x = tape.constant(m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn shape_error_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn uniform_cross_entropy_is_ln_classes() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 10]));
        for target in 0..10 {
            let l = tape.cross_entropy(logits, &[target]).unwrap();
            assert!((tape.value(l).item() - 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        // loss = sum(W x): dW[i, j] = x[j]
        let mut tape = Tape::new();
        let w = tape.param("w", &m(2, 3, &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]));
        let x = tape.constant(m(1, 3, &[1.0, 2.0, 3.0]));
        let y = tape.linear(x, w, None).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(
            g.param("w").unwrap().data(),
            &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn disconnected_parameter_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param("w", &m(1, 2, &[1.0, 2.0]));
        let unused = tape.param("unused", &m(1, 2, &[3.0, 4.0]));
        let _ = unused;
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("unused").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.param("w").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param("w", &m(1, 2, &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn broadcast_add_and_mul() {
        let mut tape = Tape::new();
        let a = tape.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let row = tape.constant(m(1, 2, &[10.0, 20.0]));
        let col = tape.constant(m(2, 1, &[2.0, 3.0]));
        let s = tape.add(a, row).unwrap();
        assert_eq!(tape.value(s).data(), &[11.0, 22.0, 13.0, 24.0]);
        let p = tape.mul(a, col).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 4.0, 9.0, 12.0]);
        let bad = tape.constant(m(3, 1, &[1.0, 1.0, 1.0]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn scatter_and_gather_are_adjoint() {
        let mut tape = Tape::new();
        let x = tape.param("x", &m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = tape.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.scatter_add_rows(g, &[1, 1, 0], 2).unwrap();
        assert_eq!(tape.value(s).data(), &[5.0, 6.0, 6.0, 8.0]);
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(
            grads.param("x").unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
    }
}
