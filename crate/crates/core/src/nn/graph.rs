//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates parameter gradients into a [`Gradients`] buffer.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamSet};
use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Windows { a: Var, k: usize },
    MaxRows { a: Var, argmax: Vec<usize> },
    Gather { table: Var, rows: Vec<usize> },
    Dropout { a: Var, mask: Vec<f64> },
    SoftmaxRows(Var),
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    WeightedXent { logits: Var, targets: Vec<usize>, weights: Vec<f64>, norm: f64, probs: Tensor },
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
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
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf. Repeated calls for the same parameter share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let (ta, tbv) = (self.value(a), self.value(b));
        let (m, k) = ta.shape();
        let n = if tb {
            assert_eq!(tbv.cols, k, "matmul_bt shape mismatch");
            tbv.rows
        } else {
            assert_eq!(tbv.rows, k, "matmul shape mismatch");
            tbv.cols
        };
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, 1.0, &ta.data, false, &tbv.data, tb, 0.0, &mut out.data);
        self.push(out, Op::MatMul { a, b, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Add(a, b))
    }

    /// Broadcast-add a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows, 1);
        assert_eq!(x.cols, r.cols, "add_row shape mismatch");
        let mut out = x.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale(k);
        self.push(out, Op::Scale(a, k))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let data = x.data.iter().map(|&v| f(v)).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(
            a,
            |v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)),
            Op::Gelu(a),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(x.rows, len);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows, "slice_rows out of range");
        let data = x.data[start * x.cols..(start + len) * x.cols].to_vec();
        let out = Tensor::from_vec(len, x.cols, data);
        self.push(out, Op::SliceRows { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols, cols, "stack_rows col mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(out, Op::StackRows(parts.to_vec()))
    }

    /// Sliding windows over rows: output row `t` is rows `t..t+k` of `a`
    /// laid end to end. Produces `count` rows.
    pub fn windows(&mut self, a: Var, k: usize, count: usize) -> Var {
        let x = self.value(a);
        assert!(count >= 1 && count + k - 1 <= x.rows, "windows out of range");
        let w = k * x.cols;
        let mut data = Vec::with_capacity(count * w);
        for t in 0..count {
            data.extend_from_slice(&x.data[t * x.cols..t * x.cols + w]);
        }
        let out = Tensor::from_vec(count, w, data);
        self.push(out, Op::Windows { a, k })
    }

    /// Column-wise maximum over all rows, giving a `1 x cols` row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.rows >= 1);
        let mut argmax = vec![0usize; x.cols];
        let mut best = x.row(0).to_vec();
        for r in 1..x.rows {
            for (c, v) in x.row(r).iter().enumerate() {
                if *v > best[c] {
                    best[c] = *v;
                    argmax[c] = r;
                }
            }
        }
        self.push(Tensor::row_vector(best), Op::MaxRows { a, argmax })
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(rows.len() * t.cols);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::from_vec(rows.len(), t.cols, data);
        self.push(
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        )
    }

    /// Multiply by a precomputed mask (inverted dropout scaling already applied).
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let x = self.value(a);
        assert_eq!(mask.len(), x.len());
        let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Dropout { a, mask })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (g, b) = (self.value(gamma), self.value(beta));
        let n = x.cols;
        assert_eq!(g.cols, n);
        assert_eq!(b.cols, n);
        let mut xhat = Tensor::zeros(x.rows, n);
        let mut out = Tensor::zeros(x.rows, n);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat.data[r * n + c] = h;
                out.data[r * n + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Class-weighted softmax cross-entropy, summed and divided by `norm`.
    /// Returns a `1 x 1` node.
    pub fn weighted_xent(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        norm: f64,
    ) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows, targets.len());
        assert_eq!(x.rows, weights.len());
        let mut probs = x.clone();
        let mut loss = 0.0;
        for r in 0..x.rows {
            let lse = log_sum_exp(x.row(r));
            loss += weights[r] * (lse - x.get(r, targets[r]));
            softmax_in_place(probs.row_mut(r));
        }
        let out = Tensor::from_vec(1, 1, vec![loss / norm]);
        self.push(
            out,
            Op::WeightedXent {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                norm,
                probs,
            },
        )
    }

    /// Back-propagate from a scalar node, returning parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads = Gradients::new(self.params.len());
        self.backward_into(loss, &mut grads);
        grads
    }

    pub fn backward_into(&self, loss: Var, out: &mut Gradients) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Value::Param(id) = node.value {
                        out.accumulate(id, &dy);
                    }
                }
                Op::MatMul { a, b, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.shape();
                    let n = dy.cols;
                    {
                        let da = slot(&mut g, *a, m, k);
                        // dA = dY * op(B)^T
                        gemm(m, n, k, 1.0, &dy.data, false, &bv.data, !tb, 1.0, &mut da.data);
                    }
                    if *tb {
                        // B stored n x k: dB = dY^T * A
                        let db = slot(&mut g, *b, n, k);
                        gemm(n, m, k, 1.0, &dy.data, true, &av.data, false, 1.0, &mut db.data);
                    } else {
                        let db = slot(&mut g, *b, k, n);
                        gemm(k, m, n, 1.0, &av.data, true, &dy.data, false, 1.0, &mut db.data);
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut g, *a, &dy);
                    add_into(&mut g, *b, &dy);
                }
                Op::AddRow(a, row) => {
                    let mut sum = Tensor::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for (s, v) in sum.data.iter_mut().zip(dy.row(r)) {
                            *s += v;
                        }
                    }
                    add_into(&mut g, *row, &sum);
                    add_into_owned(&mut g, *a, dy);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = zip_map(&dy, bv, |d, y| d * y);
                    let db = zip_map(&dy, av, |d, x| d * x);
                    add_into_owned(&mut g, *a, da);
                    add_into_owned(&mut g, *b, db);
                }
                Op::Scale(a, k) => {
                    let mut d = dy;
                    d.scale(*k);
                    add_into_owned(&mut g, *a, d);
                }
                Op::Relu(a) => {
                    let y = self.value(Var(i));
                    let d = zip_map(&dy, y, |d, y| if y > 0.0 { d } else { 0.0 });
                    add_into_owned(&mut g, *a, d);
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(i));
                    let d = zip_map(&dy, y, |d, y| d * (1.0 - y * y));
                    add_into_owned(&mut g, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(i));
                    let d = zip_map(&dy, y, |d, y| d * y * (1.0 - y));
                    add_into_owned(&mut g, *a, d);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let d = zip_map(&dy, x, |d, x| {
                        let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                        d * (cdf + x * pdf)
                    });
                    add_into_owned(&mut g, *a, d);
                }
                Op::SliceCols { a, start } => {
                    let av = self.value(*a);
                    let da = slot(&mut g, *a, av.rows, av.cols);
                    for r in 0..dy.rows {
                        let dst = &mut da.row_mut(r)[*start..*start + dy.cols];
                        for (o, v) in dst.iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::SliceRows { a, start } => {
                    let av = self.value(*a);
                    let da = slot(&mut g, *a, av.rows, av.cols);
                    let off = start * av.cols;
                    for (o, v) in da.data[off..off + dy.len()].iter_mut().zip(&dy.data) {
                        *o += v;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols;
                        let dp = slot(&mut g, *p, dy.rows, w);
                        for r in 0..dy.rows {
                            for (o, v) in dp.row_mut(r).iter_mut().zip(&dy.row(r)[off..off + w]) {
                                *o += v;
                            }
                        }
                        off += w;
                    }
                }
                Op::StackRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let len = pv.len();
                        let dp = slot(&mut g, *p, pv.rows, pv.cols);
                        for (o, v) in dp.data.iter_mut().zip(&dy.data[off..off + len]) {
                            *o += v;
                        }
                        off += len;
                    }
                }
                Op::Windows { a, k } => {
                    let av = self.value(*a);
                    let cols = av.cols;
                    let w = k * cols;
                    let da = slot(&mut g, *a, av.rows, cols);
                    for t in 0..dy.rows {
                        let dst = &mut da.data[t * cols..t * cols + w];
                        for (o, v) in dst.iter_mut().zip(dy.row(t)) {
                            *o += v;
                        }
                    }
                }
                Op::MaxRows { a, argmax } => {
                    let av = self.value(*a);
                    let da = slot(&mut g, *a, av.rows, av.cols);
                    for (c, &r) in argmax.iter().enumerate() {
                        da.data[r * av.cols + c] += dy.data[c];
                    }
                }
                Op::Gather { table, rows } => {
                    let tv = self.value(*table);
                    let cols = tv.cols;
                    match self.nodes[table.0].value {
                        // sparse update straight into the parameter gradient
                        Value::Param(id) => {
                            let dt = out.slot_mut(id, tv.rows, cols);
                            for (i, &r) in rows.iter().enumerate() {
                                for (o, v) in dt.row_mut(r).iter_mut().zip(dy.row(i)) {
                                    *o += v;
                                }
                            }
                        }
                        Value::Owned(_) => {
                            let dt = slot(&mut g, *table, tv.rows, cols);
                            for (i, &r) in rows.iter().enumerate() {
                                for (o, v) in dt.row_mut(r).iter_mut().zip(dy.row(i)) {
                                    *o += v;
                                }
                            }
                        }
                    }
                }
                Op::Dropout { a, mask } => {
                    let data = dy.data.iter().zip(mask).map(|(d, m)| d * m).collect();
                    add_into_owned(&mut g, *a, Tensor::from_vec(dy.rows, dy.cols, data));
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(i));
                    let mut d = Tensor::zeros(dy.rows, dy.cols);
                    for r in 0..dy.rows {
                        let (yr, dr) = (y.row(r), dy.row(r));
                        let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                        for (o, (p, q)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(dr)) {
                            *o = p * (q - dot);
                        }
                    }
                    add_into_owned(&mut g, *a, d);
                }
                Op::LayerNorm {
                    a,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let n = dy.cols;
                    let mut dgamma = Tensor::zeros(1, n);
                    let mut dbeta = Tensor::zeros(1, n);
                    let mut dx = Tensor::zeros(dy.rows, n);
                    for r in 0..dy.rows {
                        let (dr, hr) = (dy.row(r), xhat.row(r));
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..n {
                            dgamma.data[c] += dr[c] * hr[c];
                            dbeta.data[c] += dr[c];
                            let dh = dr[c] * gv.data[c];
                            sum_d += dh;
                            sum_dh += dh * hr[c];
                        }
                        let scale = inv_std[r] / n as f64;
                        for c in 0..n {
                            let dh = dr[c] * gv.data[c];
                            dx.data[r * n + c] =
                                scale * (n as f64 * dh - sum_d - hr[c] * sum_dh);
                        }
                    }
                    add_into_owned(&mut g, *gamma, dgamma);
                    add_into_owned(&mut g, *beta, dbeta);
                    add_into_owned(&mut g, *a, dx);
                }
                Op::WeightedXent {
                    logits,
                    targets,
                    weights,
                    norm,
                    probs,
                } => {
                    let up = dy.data[0];
                    let mut d = probs.clone();
                    for r in 0..d.rows {
                        let w = weights[r] / norm * up;
                        let row = d.row_mut(r);
                        row[targets[r]] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= w;
                        }
                    }
                    add_into_owned(&mut g, *logits, d);
                }
            }
        }
    }
}

fn slot(g: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut Tensor {
    g[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn add_into(g: &mut [Option<Tensor>], v: Var, d: &Tensor) {
    match &mut g[v.0] {
        Some(t) => t.add_assign(d),
        s @ None => *s = Some(d.clone()),
    }
}

fn add_into_owned(g: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut g[v.0] {
        Some(t) => t.add_assign(&d),
        s @ None => *s = Some(d),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences against every op on a small composite graph.
    fn check<F>(params: &mut ParamSet, build: F)
    where
        F: Fn(&mut Tape) -> Var,
    {
        let grads = {
            let mut tape = Tape::new(params);
            let loss = build(&mut tape);
            tape.backward(loss)
        };
        let eps = 1e-6;
        let ids: Vec<ParamId> = params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            for j in 0..params.get(id).len() {
                let orig = params.get(id).data[j];
                params.get_mut(id).data[j] = orig + eps;
                let lp = {
                    let mut t = Tape::new(params);
                    let l = build(&mut t);
                    t.value(l).data[0]
                };
                params.get_mut(id).data[j] = orig - eps;
                let lm = {
                    let mut t = Tape::new(params);
                    let l = build(&mut t);
                    t.value(l).data[0]
                };
                params.get_mut(id).data[j] = orig;
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = grads.get(id).map_or(0.0, |g| g.data[j]);
                let denom = numeric.abs().max(analytic.abs()).max(1e-7);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-4,
                    "{} [{j}]: analytic {analytic} numeric {numeric}",
                    params.name(id)
                );
            }
        }
    }

    #[test]
    fn composite_graph_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParamSet::new();
        let emb = p.insert("emb", Tensor::uniform(6, 3, 1.0, &mut rng));
        let w = p.insert("w", Tensor::uniform(6, 4, 0.5, &mut rng));
        let b = p.insert("b", Tensor::uniform(1, 4, 0.5, &mut rng));
        let gam = p.insert("g", Tensor::uniform(1, 4, 1.0, &mut rng));
        let bet = p.insert("be", Tensor::uniform(1, 4, 1.0, &mut rng));
        let u = p.insert("u", Tensor::uniform(4, 2, 0.5, &mut rng));
        check(&mut p, |t| {
            let e = t.param(emb);
            let x = t.gather(e, &[0, 2, 5, 1, 3]);
            let win = t.windows(x, 2, 4);
            let wv = t.param(w);
            let bv = t.param(b);
            let h = t.matmul(win, wv);
            let h = t.add_row(h, bv);
            let (gv, bev) = (t.param(gam), t.param(bet));
            let h = t.layer_norm(h, gv, bev, 1e-5);
            let s = t.sigmoid(h);
            let th = t.tanh(h);
            let gl = t.gelu(h);
            let m = t.mul(s, th);
            let m = t.add(m, gl);
            let att = t.matmul_bt(m, h);
            let att = t.softmax_rows(att);
            let m = t.matmul(att, m);
            let a = t.slice_cols(m, 0, 2);
            let c = t.slice_cols(m, 2, 2);
            let m = t.concat_cols(&[c, a]);
            let r0 = t.slice_rows(m, 0, 1);
            let r1 = t.slice_rows(m, 2, 2);
            let m = t.stack_rows(&[r1, r0]);
            let m = t.scale(m, 1.3);
            let pooled = t.max_rows(m);
            let pooled = t.relu(pooled);
            let rows = t.stack_rows(&[pooled, r0]);
            let uv = t.param(u);
            let logits = t.matmul(rows, uv);
            t.weighted_xent(logits, &[1, 0], &[0.3, 0.7], 1.0)
        });
    }
}
