//! Eager reverse-mode differentiation over a closed set of primitives.
//!
//! Every operation computes its value immediately and appends a node to the
//! tape. Nodes only reference earlier nodes, so creation order is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    Row,
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSumExp(Var, Option<usize>),
    Concat(Vec<Var>, usize),
    SliceCols(Var, usize, usize),
    Sum(Var),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` did not affect
    /// the output.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

// out[m,n] += a[m,k] * b[k,n]
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m,k] += g[m,n] * b[k,n]^T
fn mm_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[k,n] += a[m,k]^T * g[m,n]
fn mm_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Shift-stabilised log-sum-exp over `xs` (non-empty).
pub(crate) fn lse(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, vec![*m, *n]),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => {
                (*b1, *m, *k, *n, vec![*b1, *m, *n])
            }
            _ => return Err(shape_err(format!("matmul {sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for t in 0..batch {
                mm_acc(
                    &av[t * m * k..(t + 1) * m * k],
                    &bv[t * k * n..(t + 1) * k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), needs))
    }

    /// `a + b` where `b` has `a`'s shape, is a row vector (`[n]` or `[1,n]`)
    /// added to every row of a matrix, or a column `[m,1]` added to every column.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mode = if sa == sb {
            Broadcast::Same
        } else {
            match (sa.as_slice(), sb.as_slice()) {
                ([_, n], [n2]) | ([_, n], [1, n2]) if n == n2 => Broadcast::Row,
                ([m, _], [m2, 1]) if m == m2 => Broadcast::Col,
                _ => return Err(shape_err(format!("add {sa:?} + {sb:?}"))),
            }
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<f64> = match mode {
            Broadcast::Same => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            Broadcast::Row => {
                let n = sa[1];
                av.iter().enumerate().map(|(i, x)| x + bv[i % n]).collect()
            }
            Broadcast::Col => {
                let n = sa[1];
                av.iter().enumerate().map(|(i, x)| x + bv[i / n]).collect()
            }
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(sa, out)?, Op::Add(a, b, mode), needs))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(format!("mul {sa:?} * {sb:?}")));
        }
        let shape = sa.to_vec();
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i] * c);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, c), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i].tanh());
        let needs = self.needs(a);
        self.push(out, Op::Tanh(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_fn(t.shape(), |i| sigmoid(t.data()[i]));
        let needs = self.needs(a);
        self.push(out, Op::Sigmoid(a), needs)
    }

    /// Softmax over the last axis of a vector or each row of a matrix,
    /// restricted to `mask`ed-in positions. Masked-out positions (and rows
    /// with no unmasked position) are zero.
    pub fn softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().ok_or_else(|| shape_err("softmax of a scalar".into()))?;
        if t.rank() > 2 {
            return Err(shape_err(format!("softmax over {:?}", t.shape())));
        }
        if let Some(m) = &mask {
            if m.len() != t.len() {
                return Err(shape_err(format!("softmax mask {} vs {:?}", m.len(), t.shape())));
            }
        }
        let mut out = vec![0.0; t.len()];
        for (r, row) in t.data().chunks(n.max(1)).enumerate() {
            let on = |j: usize| mask.as_ref().is_none_or(|m| m[r * n + j]);
            let live = (0..n).filter(|&j| on(j));
            let max = live.clone().map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in live.clone() {
                let e = (row[j] - max).exp();
                out[r * n + j] = e;
                total += e;
            }
            for j in live {
                out[r * n + j] /= total;
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a), needs))
    }

    /// Log-sum-exp over every element (`axis = None`, scalar result) or over
    /// one axis of a matrix.
    pub fn logsumexp(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Empty("logsumexp of an empty tensor"));
        }
        let out = match axis {
            None => Tensor::scalar(lse(t.data().iter().copied())),
            Some(ax) if t.rank() == 2 && ax < 2 => {
                let (m, n) = (t.rows(), t.cols());
                let d = t.data();
                if ax == 0 {
                    Tensor::vector((0..n).map(|j| lse((0..m).map(|i| d[i * n + j]))).collect())
                } else {
                    Tensor::vector((0..m).map(|i| lse(d[i * n..(i + 1) * n].iter().copied())).collect())
                }
            }
            Some(ax) => return Err(shape_err(format!("logsumexp axis {ax} of {:?}", t.shape()))),
        };
        let needs = self.needs(a);
        Ok(self.push(out, Op::LogSumExp(a, axis), needs))
    }

    /// Concatenates along axis 0 (any rank, trailing dims equal) or axis 1
    /// (matrices with equal row counts).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or(Error::Empty("concat of nothing"))?)
            .to_vec();
        let out = match axis {
            0 => {
                let tail = &first[1.min(first.len())..];
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != first.len() || s.get(1..) != first.get(1..) || s.is_empty() {
                        return Err(shape_err(format!("concat axis 0 {first:?} with {s:?}")));
                    }
                    rows += s[0];
                    data.extend_from_slice(self.value(p).data());
                }
                let mut shape = vec![rows];
                shape.extend_from_slice(tail);
                Tensor::new(shape, data)?
            }
            1 => {
                if first.len() != 2 {
                    return Err(shape_err(format!("concat axis 1 of {first:?}")));
                }
                let m = first[0];
                let mut widths = Vec::with_capacity(parts.len());
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != 2 || s[0] != m {
                        return Err(shape_err(format!("concat axis 1 {first:?} with {s:?}")));
                    }
                    widths.push(s[1]);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(m * total);
                for i in 0..m {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
                    }
                }
                Tensor::new(vec![m, total], data)?
            }
            _ => return Err(shape_err(format!("concat axis {axis}"))),
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), needs))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || start > end || end > t.cols() {
            return Err(shape_err(format!("slice {start}..{end} of {:?}", t.shape())));
        }
        let (m, n, w) = (t.rows(), t.cols(), end - start);
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&t.data()[i * n + start..i * n + end]);
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(vec![m, w], data)?, Op::SliceCols(a, start, end), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Picks elements by flat (row-major) index into a vector.
    pub fn gather(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.len()) {
            return Err(shape_err(format!("gather index {bad} of {:?}", t.shape())));
        }
        let out = Tensor::vector(index.iter().map(|&i| t.data()[i]).collect());
        let needs = self.needs(a);
        Ok(self.push(out, Op::Gather(a, index), needs))
    }

    /// Selects slices along axis 0.
    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let Some((&n_rows, tail)) = t.shape().split_first() else {
            return Err(shape_err("select_rows of a scalar".into()));
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(shape_err(format!("row {bad} of {:?}", t.shape())));
        }
        let width: usize = tail.iter().product();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in &rows {
            data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(tail);
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::SelectRows(a, rows), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), needs))
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(shape_err(format!("backward from non-scalar {:?}", out.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Tensor::filled(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k, n) = match av.shape() {
                    [m, k] => (1, *m, *k, bv.shape()[1]),
                    [bt, m, k] => (*bt, *m, *k, bv.shape()[2]),
                    _ => unreachable!("matmul operands checked on construction"),
                };
                self.accumulate(grads, *a, |ga| {
                    for t in 0..batch {
                        mm_a_bt_acc(
                            &gd[t * m * n..(t + 1) * m * n],
                            &bv.data()[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for t in 0..batch {
                        mm_at_b_acc(
                            &av.data()[t * m * k..(t + 1) * m * k],
                            &gd[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Add(a, b, mode) => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(gd).for_each(|(o, x)| *o += x);
                });
                let n = *g.shape().last().unwrap_or(&1);
                self.accumulate(grads, *b, |gb| match mode {
                    Broadcast::Same => gb.iter_mut().zip(gd).for_each(|(o, x)| *o += x),
                    Broadcast::Row => gd.iter().enumerate().for_each(|(i, x)| gb[i % n] += x),
                    Broadcast::Col => gd.iter().enumerate().for_each(|(i, x)| gb[i / n] += x),
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gd[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += gd[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(gd).for_each(|(o, x)| *o += x * c);
            }),
            Op::Tanh(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += gd[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Sigmoid(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += gd[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                self.accumulate(grads, *a, |ga| {
                    for r in 0..y.len() / n.max(1) {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &gd[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            // masked positions have y = 0 and get no gradient
                            ga[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSumExp(a, axis) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, |ga| match axis {
                    None => {
                        for (o, xi) in ga.iter_mut().zip(x.data()) {
                            *o += gd[0] * (xi - y[0]).exp();
                        }
                    }
                    Some(ax) => {
                        let n = x.cols();
                        for (i, (o, xi)) in ga.iter_mut().zip(x.data()).enumerate() {
                            let r = if *ax == 0 { i % n } else { i / n };
                            *o += gd[r] * (xi - y[r]).exp();
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        self.accumulate(grads, p, |gp| {
                            gp.iter_mut()
                                .zip(&gd[offset..offset + len])
                                .for_each(|(o, x)| *o += x);
                        });
                        offset += len;
                    }
                } else {
                    let total = g.cols();
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        self.accumulate(grads, p, |gp| {
                            for i in 0..gp.len() / w.max(1) {
                                for j in 0..w {
                                    gp[i * w + j] += gd[i * total + col + j];
                                }
                            }
                        });
                        col += w;
                    }
                }
            }
            Op::SliceCols(a, start, end) => {
                let n = self.value(*a).cols();
                let w = end - start;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..gd.len() / w.max(1) {
                        for j in 0..w {
                            ga[i * n + start + j] += gd[i * w + j];
                        }
                    }
                });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().for_each(|o| *o += gd[0]);
            }),
            Op::Gather(a, index) => self.accumulate(grads, *a, |ga| {
                for (k, &i) in index.iter().enumerate() {
                    ga[i] += gd[k];
                }
            }),
            Op::SelectRows(a, rows) => {
                let width = self.value(*a).len() / self.shape(*a)[0].max(1);
                self.accumulate(grads, *a, |ga| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..width {
                            ga[r * width + j] += gd[k * width + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(gd).for_each(|(o, x)| *o += x);
            }),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
