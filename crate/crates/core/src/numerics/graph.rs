//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s in
//! topological order. [`Graph::backward`] replays the recorded rules in
//! reverse and returns a [`Gradients`] record that can be folded into the
//! [`ParamStore`]. With recording disabled ([`Graph::inference`]) the same
//! code paths compute values only.

use super::kernels::{gemm, sigmoid, MatRef};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Concat { a: Var, b: Var },
    SliceLast { x: Var, start: usize },
    ReverseTime { x: Var, lengths: Vec<usize> },
    SelectTime { x: Var, t: usize },
    StackTime { parts: Vec<Var> },
    Reshape { x: Var },
    MaskFill { x: Var, mask: Vec<bool> },
    Softmax { x: Var },
    Conv1d { x: Var, w: Var, b: Var, cols: Tensor, lengths: Vec<usize> },
    WindowMean { x: Var, k: usize, lengths: Vec<usize> },
    Gather { table: Var, ids: Vec<usize>, skip: Option<usize> },
    BatchDot { z: Var, q: Var },
    BatchWeighted { a: Var, x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Tensor },
    Sum { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node {
    value: Option<Tensor>,
    param: Option<ParamId>,
    op: Op,
    needs_grad: bool,
}

/// Dynamic computation graph, rebuilt per forward pass.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    record: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// ∂loss/∂v, or `None` when `v` does not influence the loss through a
    /// differentiable path.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.wrt(v))
    }

    /// Adds every parameter gradient into `store`. Repeated calls accumulate.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

/// Splits a `[B, T, d]` or `[T, d]` shape into `(B, T, d)`.
fn btd(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [t, d] => Some((1, t, d)),
        [b, t, d] => Some((b, t, d)),
        _ => None,
    }
}

impl<'p> Graph<'p> {
    /// Recording graph over `params`.
    pub fn new(params: &'p ParamStore) -> Self {
        Self::build(Some(params), true)
    }

    /// Value-only graph over `params`; nothing is recorded for backward.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::build(Some(params), false)
    }

    /// Recording graph with no parameters attached (inputs only).
    pub fn standalone() -> Graph<'static> {
        Graph::build(None, true)
    }

    fn build(params: Option<&'p ParamStore>, record: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.map_or(0, ParamStore::len)],
            record,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after `mark` (a previous [`Graph::len`]).
    /// Vars created after the mark become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        for slot in &mut self.param_vars {
            if slot.is_some_and(|v| v.0 >= mark) {
                *slot = None;
            }
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(t), _) => t,
            (None, Some(id)) => self.params.expect("param node without store").value(id),
            (None, None) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.record && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Input leaf; with `requires_grad` its gradient is reported by backward.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op: Op::Leaf,
            needs_grad: self.record && requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let needs_grad = self.record && store.get(id).requires_grad;
        self.nodes.push(Node {
            value: None,
            param: Some(id),
            op: Op::Leaf,
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `A·B` where `A` is `[.., k]` and `B` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let k = av.last_dim();
        if bv.shape().len() != 2 || bv.shape()[0] != k {
            return shape_err("matmul", av.shape(), bv.shape());
        }
        let (m, n) = (av.rows(), bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::row_major(av.data(), m, k),
            MatRef::row_major(bv.data(), k, n),
            &mut out,
            0.0,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b }, &[a, b]))
    }

    /// `A·Bᵀ` where `A` is `[.., k]` and `B` is `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let k = av.last_dim();
        if bv.shape().len() != 2 || bv.shape()[1] != k {
            return shape_err("matmul_nt", av.shape(), bv.shape());
        }
        let (m, n) = (av.rows(), bv.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::row_major(av.data(), m, k),
            MatRef::row_major(bv.data(), n, k).t(),
            &mut out,
            0.0,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMulNt { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err("add", av.shape(), bv.shape());
        }
        let mut t = av.clone();
        t.add_assign(bv);
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.last_dim() {
            return shape_err("add_bias", xv.shape(), bv.shape());
        }
        let mut t = xv.clone();
        let n = bv.len();
        for row in t.data_mut().chunks_exact_mut(n) {
            for (r, bb) in row.iter_mut().zip(bv.data()) {
                *r += bb;
            }
        }
        Ok(self.push(t, Op::AddBias { x, b }, &[x, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err("mul", av.shape(), bv.shape());
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale { x, factor }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push(t, Op::Tanh { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid { x }, &[x])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return shape_err("concat", sa, sb);
        }
        let (na, nb) = (av.last_dim(), bv.last_dim());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = na + nb;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat { a, b }, &[a, b]))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if len == 0 || start + len > n {
            return shape_err("slice_last", xv.shape(), &[start, len]);
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::SliceLast { x, start }, &[x]))
    }

    /// Reverses the first `lengths[b]` time steps of every sequence of a
    /// `[B, T, d]` (or `[T, d]`) tensor; padding rows stay in place.
    pub fn reverse_time(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let Some((b, t, _)) = btd(xv.shape()) else {
            return shape_err("reverse_time", xv.shape(), &[]);
        };
        if lengths.len() != b || lengths.iter().any(|&l| l > t) {
            return shape_err("reverse_time", xv.shape(), lengths);
        }
        let t_out = reverse_rows_within(xv, lengths);
        Ok(self.push(
            t_out,
            Op::ReverseTime {
                x,
                lengths: lengths.to_vec(),
            },
            &[x],
        ))
    }

    /// Plain row reversal of a `[T, d]` tensor.
    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let t = match btd(self.shape(x)) {
            Some((1, t, _)) if self.shape(x).len() == 2 => t,
            _ => return shape_err("reverse_rows", self.shape(x), &[]),
        };
        self.reverse_time(x, &[t])
    }

    /// Time slice `t` of a `[B, T, d]` tensor, giving `[B, d]`.
    pub fn select_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let xv = self.value(x);
        let (b, steps, d) = match *xv.shape() {
            [b, s, d] if t < s => (b, s, d),
            _ => return shape_err("select_time", xv.shape(), &[t]),
        };
        let mut data = Vec::with_capacity(b * d);
        for bi in 0..b {
            data.extend_from_slice(xv.row(bi * steps + t));
        }
        let out = Tensor::new(vec![b, d], data)?;
        Ok(self.push(out, Op::SelectTime { x, t }, &[x]))
    }

    /// Stacks `[B, d]` slices into `[B, T, d]`.
    pub fn stack_time(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::Config("stack_time of nothing".into()))?);
        let shape0 = first.shape().to_vec();
        let [b, d] = shape0[..] else {
            return shape_err("stack_time", &shape0, &[]);
        };
        let steps = parts.len();
        let mut data = vec![0.0; b * steps * d];
        for (t, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            if pv.shape() != shape0.as_slice() {
                return shape_err("stack_time", &shape0, pv.shape());
            }
            for bi in 0..b {
                let dst = (bi * steps + t) * d;
                data[dst..dst + d].copy_from_slice(pv.row(bi));
            }
        }
        let out = Tensor::new(vec![b, steps, d], data)?;
        Ok(self.push(
            out,
            Op::StackTime {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Writes `-inf` where `mask` is false. Masked entries receive no gradient.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return shape_err("mask_fill", xv.shape(), &[mask.len()]);
        }
        let mut t = xv.clone();
        for (v, &keep) in t.data_mut().iter_mut().zip(mask) {
            if !keep {
                *v = f64::NEG_INFINITY;
            }
        }
        Ok(self.push(
            t,
            Op::MaskFill {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    /// Softmax over the last axis with max subtraction; `-inf` maps to 0.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = softmax_rows(self.value(x))?;
        Ok(self.push(t, Op::Softmax { x }, &[x]))
    }

    /// Length-preserving 1-D convolution over time.
    ///
    /// `x` is `[B, T, d_in]` (or `[T, d_in]`), `w` is `[k, d_in, d_out]` with
    /// odd `k`, `b` is `[d_out]`. Each sequence is zero-padded by `(k-1)/2`
    /// rows on both sides; with `lengths`, rows at or beyond a sequence's
    /// length are treated as padding on input and produce zero output.
    pub fn conv1d_same(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        lengths: Option<&[usize]>,
    ) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let Some((batch, steps, d_in)) = btd(xv.shape()) else {
            return shape_err("conv1d_same", xv.shape(), wv.shape());
        };
        let [k, wd_in, d_out] = *wv.shape() else {
            return shape_err("conv1d_same", xv.shape(), wv.shape());
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("convolution kernel width {k} must be odd")));
        }
        if wd_in != d_in || bv.len() != d_out {
            return shape_err("conv1d_same", xv.shape(), wv.shape());
        }
        let lengths = resolve_lengths(lengths, batch, steps, xv.shape())?;
        let cols = im2col(xv, batch, steps, d_in, k, &lengths);
        let mut out = vec![0.0; batch * steps * d_out];
        gemm(
            MatRef::row_major(cols.data(), batch * steps, k * d_in),
            MatRef::row_major(wv.data(), k * d_in, d_out),
            &mut out,
            0.0,
        );
        for bi in 0..batch {
            for t in 0..steps {
                let row = &mut out[(bi * steps + t) * d_out..(bi * steps + t + 1) * d_out];
                if t < lengths[bi] {
                    row.iter_mut().zip(bv.data()).for_each(|(o, bb)| *o += bb);
                } else {
                    row.iter_mut().for_each(|o| *o = 0.0);
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let t = Tensor::new(shape, out)?;
        let op = if self.record {
            Op::Conv1d { x, w, b, cols, lengths }
        } else {
            Op::Leaf
        };
        Ok(self.push(t, op, &[x, w, b]))
    }

    /// Mean over a centered window of odd width `k` with zero padding
    /// (always divides by `k`). Padding rows produce zero output.
    pub fn window_mean(&mut self, x: Var, k: usize, lengths: Option<&[usize]>) -> Result<Var> {
        if k % 2 == 0 {
            return Err(Error::Config(format!("pooling width {k} must be odd")));
        }
        let xv = self.value(x);
        let Some((batch, steps, _)) = btd(xv.shape()) else {
            return shape_err("window_mean", xv.shape(), &[k]);
        };
        let lengths = resolve_lengths(lengths, batch, steps, xv.shape())?;
        let r = (k / 2) as isize;
        let inv = 1.0 / k as f64;
        let mut out = Tensor::zeros(xv.shape());
        for bi in 0..batch {
            let len = lengths[bi] as isize;
            for t in 0..len {
                let dst = (bi * steps) + t as usize;
                for u in (t - r).max(0)..(t + r + 1).min(len) {
                    let src = xv.row(bi * steps + u as usize);
                    for (o, s) in out.row_mut(dst).iter_mut().zip(src) {
                        *o += s;
                    }
                }
                out.row_mut(dst).iter_mut().for_each(|o| *o *= inv);
            }
        }
        Ok(self.push(out, Op::WindowMean { x, k, lengths }, &[x]))
    }

    /// Row lookup `table[ids[i]]`, shaped `prefix ++ [d]`. Rows looked up
    /// with id `skip` receive no gradient.
    pub fn gather(
        &mut self,
        table: Var,
        ids: &[usize],
        prefix: &[usize],
        skip: Option<usize>,
    ) -> Result<Var> {
        let tv = self.value(table);
        let [vocab, d] = *tv.shape() else {
            return shape_err("gather", tv.shape(), prefix);
        };
        if prefix.iter().product::<usize>() != ids.len() {
            return shape_err("gather", prefix, &[ids.len()]);
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for (position, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { position, id, vocab });
            }
            data.extend_from_slice(tv.row(id));
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                skip,
            },
            &[table],
        ))
    }

    /// `out[b, j] = z[b, j, :] · q[b, :]`; `z` may have batch 1 (broadcast).
    pub fn batch_dot(&mut self, z: Var, q: Var) -> Result<Var> {
        let (zv, qv) = (self.value(z), self.value(q));
        let (zb, m, d) = match *zv.shape() {
            [zb, m, d] => (zb, m, d),
            _ => return shape_err("batch_dot", zv.shape(), qv.shape()),
        };
        let b = match *qv.shape() {
            [b, qd] if qd == d && (zb == b || zb == 1) => b,
            _ => return shape_err("batch_dot", zv.shape(), qv.shape()),
        };
        let mut out = vec![0.0; b * m];
        for bi in 0..b {
            let zi = if zb == 1 { 0 } else { bi };
            let qrow = qv.row(bi);
            for j in 0..m {
                out[bi * m + j] = dot(zv.row(zi * m + j), qrow);
            }
        }
        let t = Tensor::new(vec![b, m], out)?;
        Ok(self.push(t, Op::BatchDot { z, q }, &[z, q]))
    }

    /// `out[b, :] = Σ_j a[b, j] · x[b, j, :]`; `x` may have batch 1.
    pub fn batch_weighted(&mut self, a: Var, x: Var) -> Result<Var> {
        let (av, xv) = (self.value(a), self.value(x));
        let (xb, m, d) = match *xv.shape() {
            [xb, m, d] => (xb, m, d),
            _ => return shape_err("batch_weighted", av.shape(), xv.shape()),
        };
        let b = match *av.shape() {
            [b, am] if am == m && (xb == b || xb == 1) => b,
            _ => return shape_err("batch_weighted", av.shape(), xv.shape()),
        };
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let xi = if xb == 1 { 0 } else { bi };
            let orow = &mut out[bi * d..(bi + 1) * d];
            for j in 0..m {
                let w = av.data()[bi * m + j];
                if w == 0.0 {
                    continue;
                }
                for (o, xx) in orow.iter_mut().zip(xv.row(xi * m + j)) {
                    *o += w * xx;
                }
            }
        }
        let t = Tensor::new(vec![b, d], out)?;
        Ok(self.push(t, Op::BatchWeighted { a, x }, &[a, x]))
    }

    /// `Σ_b weights[b] · -log softmax(logits[b])[targets[b]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let [b, v] = *lv.shape() else {
            return shape_err("cross_entropy", lv.shape(), &[targets.len()]);
        };
        if targets.len() != b || weights.len() != b {
            return shape_err("cross_entropy", lv.shape(), &[targets.len(), weights.len()]);
        }
        let logp = lv.log_softmax_rows();
        let mut total = 0.0;
        for (bi, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= v {
                return Err(Error::TokenOutOfRange {
                    position: bi,
                    id: t,
                    vocab: v,
                });
            }
            if w != 0.0 {
                total -= w * logp.data()[bi * v + t];
            }
        }
        let probs = logp.map(f64::exp);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Multiplies `x` by a fixed mask (used for inverted dropout).
    pub fn apply_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return shape_err("apply_mask", xv.shape(), &[mask.len()]);
        }
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(id, v)| v.map(|v| (ParamId(id), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.nodes[i].value.as_ref();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        MatRef::row_major(g.data(), m, n),
                        MatRef::row_major(bv.data(), k, n).t(),
                        &mut ga,
                        0.0,
                    );
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        MatRef::row_major(av.data(), m, k).t(),
                        MatRef::row_major(g.data(), m, n),
                        &mut gb,
                        0.0,
                    );
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb).unwrap());
                }
            }
            Op::MatMulNt { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[0]);
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        MatRef::row_major(g.data(), m, n),
                        MatRef::row_major(bv.data(), n, k),
                        &mut ga,
                        0.0,
                    );
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                }
                if needs(*b) {
                    let mut gb = vec![0.0; n * k];
                    gemm(
                        MatRef::row_major(g.data(), m, n).t(),
                        MatRef::row_major(av.data(), m, k),
                        &mut gb,
                        0.0,
                    );
                    self.accumulate(grads, *b, Tensor::new(vec![n, k], gb).unwrap());
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, g.clone());
                if needs(*b) {
                    let n = g.last_dim();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    let shape = self.shape(*b).to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, gb).unwrap());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    self.accumulate(grads, *a, zip_map(g, bv, |x, y| x * y));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, zip_map(g, av, |x, y| x * y));
                }
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.map(|v| v * factor));
            }
            Op::Tanh { x } => {
                let y = out.unwrap();
                self.accumulate(grads, *x, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv)));
            }
            Op::Sigmoid { x } => {
                let y = out.unwrap();
                self.accumulate(grads, *x, zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Concat { a, b } => {
                let (na, nb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let rows = g.rows();
                let mut ga = Vec::with_capacity(rows * na);
                let mut gb = Vec::with_capacity(rows * nb);
                for r in 0..rows {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                self.accumulate(grads, *a, Tensor::new(sa, ga).unwrap());
                self.accumulate(grads, *b, Tensor::new(sb, gb).unwrap());
            }
            Op::SliceLast { x, start } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let len = g.last_dim();
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ReverseTime { x, lengths } => {
                self.accumulate(grads, *x, reverse_rows_within(g, lengths));
            }
            Op::SelectTime { x, t } => {
                let shape = self.shape(*x).to_vec();
                let steps = shape[1];
                let mut gx = Tensor::zeros(&shape);
                for bi in 0..shape[0] {
                    gx.row_mut(bi * steps + t).copy_from_slice(g.row(bi));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::StackTime { parts } => {
                let (b, steps) = (g.shape()[0], g.shape()[1]);
                for (t, &p) in parts.iter().enumerate() {
                    if !needs(p) {
                        continue;
                    }
                    let mut gp = Tensor::zeros(self.shape(p));
                    for bi in 0..b {
                        gp.row_mut(bi).copy_from_slice(g.row(bi * steps + t));
                    }
                    self.accumulate(grads, p, gp);
                }
            }
            Op::Reshape { x } => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(&shape).unwrap());
            }
            Op::MaskFill { x, mask } => {
                let mut gx = g.clone();
                for (v, &keep) in gx.data_mut().iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax { x } => {
                let y = out.unwrap();
                let n = y.last_dim();
                let mut gx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for ((o, yv), gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                debug_assert_eq!(gx.last_dim(), n);
                self.accumulate(grads, *x, gx);
            }
            Op::Conv1d { x, w, b, cols, lengths } => {
                let wv = self.value(*w);
                let [k, d_in, d_out] = *wv.shape() else { unreachable!() };
                let (batch, steps, _) = btd(self.shape(*x)).unwrap();
                // Output rows beyond a sequence's length were forced to zero.
                let mut gm = g.clone();
                for bi in 0..batch {
                    for t in lengths[bi]..steps {
                        gm.row_mut(bi * steps + t).iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                let rows = batch * steps;
                if needs(*w) {
                    let mut gw = vec![0.0; k * d_in * d_out];
                    gemm(
                        MatRef::row_major(cols.data(), rows, k * d_in).t(),
                        MatRef::row_major(gm.data(), rows, d_out),
                        &mut gw,
                        0.0,
                    );
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), gw).unwrap());
                }
                if needs(*b) {
                    let mut gb = vec![0.0; d_out];
                    for row in gm.data().chunks_exact(d_out) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    self.accumulate(grads, *b, Tensor::vector(gb));
                }
                if needs(*x) {
                    let mut gcols = vec![0.0; rows * k * d_in];
                    gemm(
                        MatRef::row_major(gm.data(), rows, d_out),
                        MatRef::row_major(wv.data(), k * d_in, d_out).t(),
                        &mut gcols,
                        0.0,
                    );
                    let gx = col2im(&gcols, self.shape(*x), batch, steps, d_in, k, lengths);
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::WindowMean { x, k, lengths } => {
                let shape = self.shape(*x).to_vec();
                let (batch, steps, _) = btd(&shape).unwrap();
                let r = (*k / 2) as isize;
                let inv = 1.0 / *k as f64;
                let mut gx = Tensor::zeros(&shape);
                for bi in 0..batch {
                    let len = lengths[bi] as isize;
                    for t in 0..len {
                        let src = g.row(bi * steps + t as usize);
                        for u in (t - r).max(0)..(t + r + 1).min(len) {
                            for (o, s) in gx.row_mut(bi * steps + u as usize).iter_mut().zip(src) {
                                *o += s * inv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { table, ids, skip } => {
                let mut gt = Tensor::zeros(self.shape(*table));
                for (r, &id) in ids.iter().enumerate() {
                    if Some(id) == *skip {
                        continue;
                    }
                    for (o, s) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += s;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::BatchDot { z, q } => {
                let (zv, qv) = (self.value(*z), self.value(*q));
                let [zb, m, d] = *zv.shape() else { unreachable!() };
                let b = qv.shape()[0];
                let mut gz = Tensor::zeros(zv.shape());
                let mut gq = Tensor::zeros(qv.shape());
                for bi in 0..b {
                    let zi = if zb == 1 { 0 } else { bi };
                    for j in 0..m {
                        let gv = g.data()[bi * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let zrow = zv.row(zi * m + j);
                        axpy(gq.row_mut(bi), gv, zrow);
                        axpy(gz.row_mut(zi * m + j), gv, qv.row(bi));
                    }
                }
                debug_assert_eq!(gq.last_dim(), d);
                self.accumulate(grads, *z, gz);
                self.accumulate(grads, *q, gq);
            }
            Op::BatchWeighted { a, x } => {
                let (av, xv) = (self.value(*a), self.value(*x));
                let [xb, m, _] = *xv.shape() else { unreachable!() };
                let b = av.shape()[0];
                let mut ga = Tensor::zeros(av.shape());
                let mut gx = Tensor::zeros(xv.shape());
                for bi in 0..b {
                    let xi = if xb == 1 { 0 } else { bi };
                    let grow = g.row(bi);
                    for j in 0..m {
                        ga.data_mut()[bi * m + j] = dot(grow, xv.row(xi * m + j));
                        axpy(gx.row_mut(xi * m + j), av.data()[bi * m + j], grow);
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let up = g.item();
                let v = probs.last_dim();
                let mut gl = probs.clone();
                for (bi, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = gl.row_mut(bi);
                    if w == 0.0 {
                        row.iter_mut().for_each(|x| *x = 0.0);
                        continue;
                    }
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= w * up);
                }
                debug_assert_eq!(gl.last_dim(), v);
                self.accumulate(grads, *logits, gl);
            }
            Op::Sum { x } => {
                let up = g.item();
                self.accumulate(grads, *x, Tensor::filled(self.shape(*x), up));
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
        }
    }
}

fn resolve_lengths(
    lengths: Option<&[usize]>,
    batch: usize,
    steps: usize,
    shape: &[usize],
) -> Result<Vec<usize>> {
    match lengths {
        None => Ok(vec![steps; batch]),
        Some(l) if l.len() == batch && l.iter().all(|&x| x <= steps) => Ok(l.to_vec()),
        Some(l) => shape_err("lengths", shape, l),
    }
}

fn im2col(x: &Tensor, batch: usize, steps: usize, d_in: usize, k: usize, lengths: &[usize]) -> Tensor {
    let r = (k / 2) as isize;
    let width = k * d_in;
    let mut cols = vec![0.0; batch * steps * width];
    for bi in 0..batch {
        let len = lengths[bi] as isize;
        for t in 0..len {
            let row = &mut cols[(bi * steps + t as usize) * width..][..width];
            for u in 0..k as isize {
                let src = t + u - r;
                if src >= 0 && src < len {
                    row[u as usize * d_in..(u as usize + 1) * d_in]
                        .copy_from_slice(x.row(bi * steps + src as usize));
                }
            }
        }
    }
    Tensor::new(vec![batch * steps, width], cols).unwrap()
}

fn col2im(
    gcols: &[f64],
    shape: &[usize],
    batch: usize,
    steps: usize,
    d_in: usize,
    k: usize,
    lengths: &[usize],
) -> Tensor {
    let r = (k / 2) as isize;
    let width = k * d_in;
    let mut gx = Tensor::zeros(shape);
    for bi in 0..batch {
        let len = lengths[bi] as isize;
        for t in 0..len {
            let row = &gcols[(bi * steps + t as usize) * width..][..width];
            for u in 0..k as isize {
                let src = t + u - r;
                if src >= 0 && src < len {
                    let part = &row[u as usize * d_in..(u as usize + 1) * d_in];
                    for (o, s) in gx.row_mut(bi * steps + src as usize).iter_mut().zip(part) {
                        *o += s;
                    }
                }
            }
        }
    }
    gx
}

fn reverse_rows_within(x: &Tensor, lengths: &[usize]) -> Tensor {
    let (_, steps, _) = btd(x.shape()).unwrap();
    let mut out = x.clone();
    for (bi, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            out.row_mut(bi * steps + t)
                .copy_from_slice(x.row(bi * steps + len - 1 - t));
        }
    }
    out
}

/// Softmax over the last axis of a tensor value.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    let n = x.last_dim();
    for (r, row) in out.data_mut().chunks_exact_mut(n).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptyAttention { row: r });
        }
        if !max.is_finite() {
            return Err(Error::NonFinite(format!("softmax row {r} contains {max}")));
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(a, b)| *a += alpha * b);
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}
