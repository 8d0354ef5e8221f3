//! Eager reverse-mode differentiation.
//!
//! Every operation evaluates immediately and appends a node to the tape; the
//! node keeps whatever the backward pass needs (softmax outputs, layer-norm
//! statistics, attention weights). `Graph::backward` walks the tape in
//! reverse and accumulates gradients for every node.

use super::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
        key_mask: Vec<bool>,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    LogSoftmax(Var),
    Softmax(Var),
    SoftmaxEntropy {
        x: Var,
        probs: Vec<T>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
    Sum(Var),
    Dot {
        x: Var,
        weights: Vec<T>,
    },
    XLogXSum(Var),
    Reshape(Var),
    Column {
        x: Var,
        col: usize,
    },
    BroadcastRows {
        x: Var,
        repeat: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Tape of evaluated operations.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Rows and columns of a tensor viewed as a matrix (last axis = columns).
fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        _ => {
            let cols = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf. Gradients are still accumulated for it, which is how
    /// parameters are differentiated.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Sums a list of same-shaped nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidInput("add_all of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, row: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, cols) = as_matrix(ta.shape());
        if tr.numel() != cols || ta.shape().is_empty() {
            return Err(mismatch(op, ta.shape(), tr.shape()));
        }
        let r = tr.data();
        let data = ta
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// `a + row` with `row` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, row, |x, y| x + y)?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// `a * row` with `row` broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, row, |x, y| x * y)?;
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * c).collect()).unwrap();
        self.push(out, Op::Scale(a, c))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.tanh()).collect()).unwrap();
        self.push(out, Op::Tanh(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = as_matrix(tx.shape());
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(mismatch("layer_norm", tx.shape(), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let n = T::of(cols as f64);
        let eps = T::of(eps);
        let mut out = vec![T::zero(); rows * cols];
        let mut rstd = Vec::with_capacity(rows);
        for (r, chunk) in tx.data().chunks(cols).enumerate() {
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            rstd.push(s);
            let o = &mut out[r * cols..(r + 1) * cols];
            for j in 0..cols {
                o[j] = (chunk[j] - mean) * s * g[j] + b[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, rstd }))
    }

    /// Gathers rows of `table` ([rows, d]) → [ids.len(), d].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(mismatch("embedding", t.shape(), &[ids.len()]));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(mismatch("embedding", t.shape(), &[bad]));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, d]`; `key_mask[b * seq + j]` is false
    /// for keys that must receive zero weight. Every sequence needs at least
    /// one visible key.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2
            || shape[0] != batch * seq
            || self.shape(k) != shape.as_slice()
            || self.shape(v) != shape.as_slice()
            || key_mask.len() != batch * seq
            || heads == 0
            || !shape[1].is_multiple_of(heads)
        {
            return Err(mismatch("attention", &shape, self.shape(k)));
        }
        let d = shape[1];
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * d];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            if !mask.iter().any(|&m| m) {
                return Err(Error::InvalidInput(format!("sequence {b} has no visible keys")));
            }
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // scores = Q Kᵀ
                T::gemm(
                    seq,
                    dh,
                    seq,
                    &qd[off..],
                    d as isize,
                    1,
                    &kd[off..],
                    1,
                    d as isize,
                    T::zero(),
                    p,
                    seq as isize,
                    1,
                );
                for row in p.chunks_mut(seq) {
                    let mut max = T::neg_infinity();
                    for (j, s) in row.iter_mut().enumerate() {
                        if mask[j] {
                            *s = *s * scale;
                            max = max.max(*s);
                        }
                    }
                    let mut total = T::zero();
                    for (j, s) in row.iter_mut().enumerate() {
                        if mask[j] {
                            *s = (*s - max).exp();
                            total = total + *s;
                        } else {
                            *s = T::zero();
                        }
                    }
                    for s in row.iter_mut() {
                        *s = *s / total;
                    }
                }
                // out = P V
                T::gemm(
                    seq,
                    seq,
                    dh,
                    p,
                    seq as isize,
                    1,
                    &vd[off..],
                    d as isize,
                    1,
                    T::zero(),
                    &mut out[off..],
                    d as isize,
                    1,
                );
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                probs,
                key_mask: key_mask.to_vec(),
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Attention weights recorded by an attention node, laid out as
    /// `[batch, heads, seq, seq]`.
    pub fn attention_weights(&self, node: Var) -> Option<&[T]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn softmax_rows(data: &[T], cols: usize, log: bool) -> Vec<T> {
        let mut out = Vec::with_capacity(data.len());
        for row in data.chunks(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            if log {
                out.extend(row.iter().map(|&x| x - lse));
            } else {
                out.extend(row.iter().map(|&x| (x - lse).exp()));
            }
        }
        out
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, cols) = as_matrix(t.shape());
        let out = Tensor::new(t.shape().to_vec(), Self::softmax_rows(t.data(), cols, true)).unwrap();
        self.push(out, Op::LogSoftmax(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, cols) = as_matrix(t.shape());
        let out = Tensor::new(t.shape().to_vec(), Self::softmax_rows(t.data(), cols, false)).unwrap();
        self.push(out, Op::Softmax(x))
    }

    /// Shannon entropy (nats) of `softmax(x)` per row → `[rows]`.
    pub fn softmax_entropy(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = as_matrix(t.shape());
        let logp = Self::softmax_rows(t.data(), cols, true);
        let probs: Vec<T> = logp.iter().map(|l| l.exp()).collect();
        let ent = (0..rows)
            .map(|r| -(r * cols..(r + 1) * cols).map(|i| probs[i] * logp[i]).sum::<T>())
            .collect();
        let out = Tensor::new(vec![rows], ent).unwrap();
        self.push(out, Op::SoftmaxEntropy { x, probs })
    }

    /// Selects rows of a matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, cols) = as_matrix(t.shape());
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(mismatch("gather_rows", t.shape(), &[bad]));
        }
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(vec![rows.len(), cols], out)?;
        Ok(self.push(out, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, width) = as_matrix(t.shape());
        if rows != cols.len() || cols.iter().any(|&c| c >= width) {
            return Err(mismatch("pick", t.shape(), &[cols.len()]));
        }
        let out = cols.iter().enumerate().map(|(i, &c)| t.data()[i * width + c]).collect();
        let out = Tensor::new(vec![rows], out)?;
        Ok(self.push(out, Op::Pick { x, cols: cols.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ_i x_i w_i` over all entries.
    pub fn dot(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != weights.len() {
            return Err(mismatch("dot", t.shape(), &[weights.len()]));
        }
        let s = t.data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    /// `Σ x ln x` with `0 ln 0 = 0`.
    pub fn xlogx_sum(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v * v.ln() } else { T::zero() })
            .sum();
        self.push(Tensor::scalar(s), Op::XLogXSum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Column `col` of a matrix → `[rows]`.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = as_matrix(t.shape());
        if col >= cols {
            return Err(mismatch("column", t.shape(), &[col]));
        }
        let out = (0..rows).map(|r| t.data()[r * cols + col]).collect();
        let out = Tensor::new(vec![rows], out)?;
        Ok(self.push(out, Op::Column { x, col }))
    }

    /// `[n, d]` → `[n * repeat, d]`, each row repeated `repeat` times in place.
    pub fn broadcast_rows(&mut self, x: Var, repeat: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(mismatch("broadcast_rows", t.shape(), &[repeat]));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(n * repeat * d);
        for r in 0..n {
            for _ in 0..repeat {
                out.extend_from_slice(t.row(r));
            }
        }
        let out = Tensor::new(vec![n * repeat, d], out)?;
        Ok(self.push(out, Op::BroadcastRows { x, repeat }))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(mismatch("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let numel = |v: Var| self.nodes[v.0].value.numel();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = numel(v);
                grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA = G Bᵀ
                let bd = val(*b);
                T::gemm(
                    m,
                    n,
                    k,
                    g,
                    n as isize,
                    1,
                    bd,
                    1,
                    n as isize,
                    T::one(),
                    acc!(*a),
                    k as isize,
                    1,
                );
                // dB = Aᵀ G
                let ad = val(*a);
                T::gemm(
                    k,
                    m,
                    n,
                    ad,
                    1,
                    k as isize,
                    g,
                    n as isize,
                    1,
                    T::one(),
                    acc!(*b),
                    n as isize,
                    1,
                );
            }
            Op::Add(a, b) => {
                for (d, &x) in acc!(*a).iter_mut().zip(g) {
                    *d = *d + x;
                }
                for (d, &x) in acc!(*b).iter_mut().zip(g) {
                    *d = *d + x;
                }
            }
            Op::AddRow(a, row) => {
                for (d, &x) in acc!(*a).iter_mut().zip(g) {
                    *d = *d + x;
                }
                let cols = numel(*row);
                let dr = acc!(*row);
                for chunk in g.chunks(cols) {
                    for (d, &x) in dr.iter_mut().zip(chunk) {
                        *d = *d + x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da: Vec<T> = g.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                let db: Vec<T> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                for (d, x) in acc!(*a).iter_mut().zip(da) {
                    *d = *d + x;
                }
                for (d, x) in acc!(*b).iter_mut().zip(db) {
                    *d = *d + x;
                }
            }
            Op::MulRow(a, row) => {
                let cols = numel(*row);
                let (av, rv) = (val(*a), val(*row));
                let mut dr = vec![T::zero(); cols];
                let mut da = vec![T::zero(); g.len()];
                for (r, chunk) in g.chunks(cols).enumerate() {
                    for j in 0..cols {
                        da[r * cols + j] = chunk[j] * rv[j];
                        dr[j] = dr[j] + chunk[j] * av[r * cols + j];
                    }
                }
                for (d, x) in acc!(*a).iter_mut().zip(da) {
                    *d = *d + x;
                }
                for (d, x) in acc!(*row).iter_mut().zip(dr) {
                    *d = *d + x;
                }
            }
            Op::Scale(a, c) => {
                for (d, &x) in acc!(*a).iter_mut().zip(g) {
                    *d = *d + x * *c;
                }
            }
            Op::Gelu(a) => {
                let (c, k) = (T::of(GELU_C), T::of(GELU_A));
                let half = T::of(0.5);
                let three = T::of(3.0);
                let dx: Vec<T> = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| {
                        let u = c * (x + k * x * x * x);
                        let t = u.tanh();
                        let du = c * (T::one() + three * k * x * x);
                        gy * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                    })
                    .collect();
                for (d, x) in acc!(*a).iter_mut().zip(dx) {
                    *d = *d + x;
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                for ((d, &gy), &t) in acc!(*a).iter_mut().zip(g).zip(y) {
                    *d = *d + gy * (T::one() - t * t);
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let xv = val(*x);
                let gm = val(*gamma);
                let cols = gm.len();
                let n = T::of(cols as f64);
                let mut dgamma = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                let mut dx = vec![T::zero(); xv.len()];
                let mut xhat = vec![T::zero(); cols];
                let mut dxhat = vec![T::zero(); cols];
                for (r, s) in rstd.iter().enumerate() {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mean = row.iter().copied().sum::<T>() / n;
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..cols {
                        xhat[j] = (row[j] - mean) * *s;
                        dgamma[j] = dgamma[j] + gr[j] * xhat[j];
                        dbeta[j] = dbeta[j] + gr[j];
                        dxhat[j] = gr[j] * gm[j];
                        sum_dxhat = sum_dxhat + dxhat[j];
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[j];
                    }
                    for j in 0..cols {
                        dx[r * cols + j] = *s * (dxhat[j] - sum_dxhat / n - xhat[j] * sum_dxhat_xhat / n);
                    }
                }
                for (d, v) in acc!(*x).iter_mut().zip(dx) {
                    *d = *d + v;
                }
                for (d, v) in acc!(*gamma).iter_mut().zip(dgamma) {
                    *d = *d + v;
                }
                for (d, v) in acc!(*beta).iter_mut().zip(dbeta) {
                    *d = *d + v;
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let dt = acc!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + g[r * d + j];
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                key_mask,
                batch,
                seq,
                heads,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = self.shape(*q)[1];
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                let mut dp = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    let mask = &key_mask[b * seq..(b + 1) * seq];
                    for h in 0..heads {
                        let off = b * seq * d + h * dh;
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        // dV = Pᵀ G
                        T::gemm(
                            seq,
                            seq,
                            dh,
                            p,
                            1,
                            seq as isize,
                            &g[off..],
                            d as isize,
                            1,
                            T::one(),
                            &mut dv[off..],
                            d as isize,
                            1,
                        );
                        // dP = G Vᵀ
                        T::gemm(
                            seq,
                            dh,
                            seq,
                            &g[off..],
                            d as isize,
                            1,
                            &vd[off..],
                            1,
                            d as isize,
                            T::zero(),
                            &mut dp,
                            seq as isize,
                            1,
                        );
                        // dS = P ⊙ (dP − rowsum(P ⊙ dP)), folded with the score scale
                        for i in 0..seq {
                            let pr = &p[i * seq..(i + 1) * seq];
                            let dr = &mut dp[i * seq..(i + 1) * seq];
                            let inner = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                            for j in 0..seq {
                                dr[j] = if mask[j] {
                                    pr[j] * (dr[j] - inner) * scale
                                } else {
                                    T::zero()
                                };
                            }
                        }
                        // dQ = dS K ; dK = dSᵀ Q
                        T::gemm(
                            seq,
                            seq,
                            dh,
                            &dp,
                            seq as isize,
                            1,
                            &kd[off..],
                            d as isize,
                            1,
                            T::one(),
                            &mut dq[off..],
                            d as isize,
                            1,
                        );
                        T::gemm(
                            seq,
                            seq,
                            dh,
                            &dp,
                            1,
                            seq as isize,
                            &qd[off..],
                            d as isize,
                            1,
                            T::one(),
                            &mut dk[off..],
                            d as isize,
                            1,
                        );
                    }
                }
                for (dst, src) in [(*q, dq), (*k, dk), (*v, dv)] {
                    for (d, x) in acc!(dst).iter_mut().zip(src) {
                        *d = *d + x;
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let (_, cols) = as_matrix(node.value.shape());
                let mut dx = vec![T::zero(); y.len()];
                for (r, gr) in g.chunks(cols).enumerate() {
                    let total = gr.iter().copied().sum::<T>();
                    for (j, &gj) in gr.iter().enumerate() {
                        let idx = r * cols + j;
                        dx[idx] = gj - y[idx].exp() * total;
                    }
                }
                for (d, v) in acc!(*x).iter_mut().zip(dx) {
                    *d = *d + v;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (_, cols) = as_matrix(node.value.shape());
                let mut dx = vec![T::zero(); y.len()];
                for (r, gr) in g.chunks(cols).enumerate() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let inner = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - inner);
                    }
                }
                for (d, v) in acc!(*x).iter_mut().zip(dx) {
                    *d = *d + v;
                }
            }
            Op::SoftmaxEntropy { x, probs } => {
                // dH/dz_j = -p_j (ln p_j + H)
                let h = node.value.data();
                let cols = probs.len() / h.len().max(1);
                let mut dx = vec![T::zero(); probs.len()];
                for (r, (&gr, &hr)) in g.iter().zip(h).enumerate() {
                    for j in 0..cols {
                        let p = probs[r * cols + j];
                        let lnp = if p > T::zero() { p.ln() } else { T::zero() };
                        dx[r * cols + j] = -gr * p * (lnp + hr);
                    }
                }
                for (d, v) in acc!(*x).iter_mut().zip(dx) {
                    *d = *d + v;
                }
            }
            Op::GatherRows { x, rows } => {
                let (_, cols) = as_matrix(self.shape(*x));
                let dx = acc!(*x);
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..cols {
                        dx[r * cols + j] = dx[r * cols + j] + g[i * cols + j];
                    }
                }
            }
            Op::Pick { x, cols } => {
                let (_, width) = as_matrix(self.shape(*x));
                let dx = acc!(*x);
                for (i, &c) in cols.iter().enumerate() {
                    dx[i * width + c] = dx[i * width + c] + g[i];
                }
            }
            Op::Sum(x) => {
                for d in acc!(*x).iter_mut() {
                    *d = *d + g[0];
                }
            }
            Op::Dot { x, weights } => {
                for (d, &w) in acc!(*x).iter_mut().zip(weights) {
                    *d = *d + g[0] * w;
                }
            }
            Op::XLogXSum(x) => {
                let xv = val(*x).to_vec();
                for (d, v) in acc!(*x).iter_mut().zip(xv) {
                    let v = v.max(T::min_positive_value());
                    *d = *d + g[0] * (v.ln() + T::one());
                }
            }
            Op::Reshape(x) => {
                for (d, &v) in acc!(*x).iter_mut().zip(g) {
                    *d = *d + v;
                }
            }
            Op::Column { x, col } => {
                let (_, cols) = as_matrix(self.shape(*x));
                let dx = acc!(*x);
                for (r, &v) in g.iter().enumerate() {
                    dx[r * cols + col] = dx[r * cols + col] + v;
                }
            }
            Op::BroadcastRows { x, repeat } => {
                let d = self.shape(*x)[1];
                let dx = acc!(*x);
                for (r, chunk) in g.chunks(d).enumerate() {
                    let src = r / repeat;
                    for j in 0..d {
                        dx[src * d + j] = dx[src * d + j] + chunk[j];
                    }
                }
            }
        }
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Parameters registered on a graph, by name.
pub struct Bound {
    vars: indexmap::IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }
}

/// Registers every tensor of `params` as a leaf of `graph`.
pub fn bind<T: Scalar>(graph: &mut Graph<T>, params: &ParamSet<T>) -> Bound {
    let vars = params
        .iter()
        .map(|(name, t)| (name.to_string(), graph.leaf(t.clone())))
        .collect();
    Bound { vars }
}

/// Evaluates `loss` over `params` and returns its value and the gradient for
/// every parameter. Parameters the loss does not touch get zero gradients.
pub fn value_and_grad<T, F>(params: &ParamSet<T>, loss: F) -> Result<(T, ParamSet<T>)>
where
    T: Scalar,
    F: FnOnce(&mut Graph<T>, &Bound) -> Result<Var>,
{
    let mut graph = Graph::new();
    let bound = bind(&mut graph, params);
    let out = loss(&mut graph, &bound)?;
    let value = graph.value(out).item();
    let grads = graph.backward(out)?;
    let mut result = ParamSet::new();
    for (name, t) in params.iter() {
        let var = bound.var(name)?;
        let g = match grads.get(var) {
            Some(g) => Tensor::new(t.shape().to_vec(), g.to_vec())?,
            None => Tensor::zeros(t.shape()),
        };
        result.insert(name, g);
    }
    Ok((value, result))
}
