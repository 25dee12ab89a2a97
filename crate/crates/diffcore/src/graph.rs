//! Tape-style computation graph.
//!
//! Nodes are appended in execution order, so the node vector is already a
//! topological order and backward is a single reverse sweep.

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, axpy, dot};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// LayerNorm variance stabilizer.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape record of one attention evaluation, kept so callers can verify
/// token budgets structurally.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionCall {
    pub queries: usize,
    pub keys: usize,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: T,
    },
    Gelu {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<T>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    RepeatRows {
        a: NodeId,
        times: usize,
    },
    SelectRows {
        a: NodeId,
        rows: Vec<usize>,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    L1 {
        a: NodeId,
        b: NodeId,
    },
    L2 {
        a: NodeId,
        b: NodeId,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation graph over one logical thread.
///
/// In inference mode (`Graph::inference`) values are computed but no backward
/// state is kept and no node requires a gradient.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
    params: Vec<(ParamId, NodeId)>,
    attention_calls: Vec<AttentionCall>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            params: Vec::new(),
            attention_calls: Vec::new(),
        }
    }

    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
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

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn attention_calls(&self) -> &[AttentionCall] {
        &self.attention_calls
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = self.record && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf whose gradient follows the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        let requires_grad = self.record && value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Parameter leaf; repeated requests for the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.params.iter().find(|(p, _)| *p == id) {
            return node;
        }
        let requires_grad = self.record;
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            requires_grad,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.params.push((id, node));
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return dim_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            );
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b },
            &[a, b],
        ))
    }

    /// `x W + b` with `x: [B, D_in]`, `W: [D_in, D_out]`, `b: [D_out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] || bv.numel() != wv.cols() {
            return dim_err(
                "linear",
                format!("x {:?}, W {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
            );
        }
        let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        kernels::matmul_acc(xv.data(), wv.data(), &mut out, m, k, n);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-empty") = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, &[x, w, b]))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return dim_err(op, format!("{:?} vs {:?}", av.shape(), bv.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x - *y).collect();
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Sub { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let f = T::from_f64(factor);
        let av = self.value(a);
        let data = av.data().iter().map(|x| *x * f).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Scale { a, factor: f }, &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|x| kernels::gelu(*x)).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Gelu { a }, &[a])
    }

    /// Row-wise normalization over the last dimension, then `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return dim_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            );
        }
        let rows = xv.rows();
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_d = T::one() / T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let op = if self.record {
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, &[x, gamma, beta]))
    }

    /// Multi-head scaled dot-product attention, `softmax(Q K^T / sqrt(d_h)) V`
    /// per head, where heads split the feature dimension into equal column
    /// blocks. With `heads == 1` this is the plain single-head formula.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, lk, d) = (qv.rows(), kv.rows(), qv.cols());
        if qv.shape().len() != 2 || kv.shape().len() != 2 || vv.shape().len() != 2 {
            return dim_err("attention", "Q, K and V must be 2-D");
        }
        if kv.cols() != d || vv.cols() != d || vv.rows() != lk {
            return dim_err(
                "attention",
                format!("Q {:?}, K {:?}, V {:?}", qv.shape(), kv.shape(), vv.shape()),
            );
        }
        if heads == 0 || d % heads != 0 {
            return dim_err("attention", format!("{d} features not divisible by {heads} heads"));
        }
        if causal && lq != lk {
            return Err(Error::InvalidMask {
                queries: lq,
                keys: lk,
            });
        }
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * lq * lk];
        let mut out = vec![T::zero(); lq * d];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..lq {
                let qi = &qv.row(i)[cols.clone()];
                let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = if causal && j > i {
                        T::neg_infinity()
                    } else {
                        scale * dot(qi, &kv.row(j)[cols.clone()])
                    };
                }
                kernels::softmax_in_place(p);
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &pj) in p.iter().enumerate() {
                    if pj != T::zero() {
                        axpy(pj, &vv.row(j)[cols.clone()], orow);
                    }
                }
            }
        }
        self.attention_calls.push(AttentionCall {
            queries: lq,
            keys: lk,
            heads,
            causal,
        });
        let op = if self.record {
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(Tensor::from_parts(vec![lq, d], out), op, &[q, k, v]))
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return dim_err("concat_rows", "no inputs");
        }
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != d {
                return dim_err("concat_rows", format!("column mismatch {} vs {d}", pv.cols()));
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / d;
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], data),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Tiles the whole input `times` times along rows.
    pub fn repeat_rows(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        if times == 0 {
            return dim_err("repeat_rows", "times must be positive");
        }
        let av = self.value(a);
        let (r, d) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(r * d * times);
        for _ in 0..times {
            data.extend_from_slice(av.data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![r * times, d], data),
            Op::RepeatRows { a, times },
            &[a],
        ))
    }

    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        let (r, d) = (av.rows(), av.cols());
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return dim_err("select_rows", format!("indices {rows:?} out of range for {r} rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend_from_slice(av.row(i));
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), d], data),
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            &[a],
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let s = av.data().iter().copied().sum::<T>() / T::from_f64(av.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Mean absolute error over all elements.
    pub fn l1_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape("l1_loss", pred, target)?;
        let (pv, tv) = (self.value(pred), self.value(target));
        let n = T::from_f64(pv.numel() as f64);
        let s = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(a, b)| (*a - *b).abs())
            .sum::<T>();
        Ok(self.push(
            Tensor::scalar(s / n),
            Op::L1 {
                a: pred,
                b: target,
            },
            &[pred, target],
        ))
    }

    /// Mean squared error over all elements.
    pub fn l2_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape("l2_loss", pred, target)?;
        let (pv, tv) = (self.value(pred), self.value(target));
        let n = T::from_f64(pv.numel() as f64);
        let s = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum::<T>();
        Ok(self.push(
            Tensor::scalar(s / n),
            Op::L2 {
                a: pred,
                b: target,
            },
            &[pred, target],
        ))
    }

    /// Reverse sweep from a scalar loss. Does not mutate the graph, so
    /// repeated calls return identical gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.record {
            return Err(Error::NotRecorded);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(dy, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(av.data(), dy, gb, m, k, n);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::matmul_nt_acc(dy, wv.data(), gx, m, n, k);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    kernels::matmul_tn_acc(xv.data(), dy, gw, m, k, n);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for r in 0..m {
                        axpy(T::one(), &dy[r * n..(r + 1) * n], gb);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(g) = self.slot(grads, *a) {
                    axpy(T::one(), dy, g);
                }
                if let Some(g) = self.slot(grads, *b) {
                    axpy(T::one(), dy, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(g) = self.slot(grads, *a) {
                    axpy(T::one(), dy, g);
                }
                if let Some(g) = self.slot(grads, *b) {
                    axpy(-T::one(), dy, g);
                }
            }
            Op::Scale { a, factor } => {
                if let Some(g) = self.slot(grads, *a) {
                    axpy(*factor, dy, g);
                }
            }
            Op::Gelu { a } => {
                let av = self.value(*a);
                if let Some(g) = self.slot(grads, *a) {
                    for ((gi, xi), di) in g.iter_mut().zip(av.data()).zip(dy) {
                        *gi = *gi + *di * kernels::gelu_grad(*xi);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*x).cols();
                let rows = rstd.len();
                let gv = self.value(*gamma).data();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + dy[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for r in 0..rows {
                        axpy(T::one(), &dy[r * d..(r + 1) * d], gb);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let inv_d = T::one() / T::from_f64(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = dy[r * d + j] * gv[j];
                        }
                        let s1 = dxhat.iter().copied().sum::<T>();
                        let s2 = dot(&dxhat, xh);
                        for j in 0..d {
                            let v = (dxhat[j] - (s1 + xh[j] * s2) * inv_d) * rstd[r];
                            gx[r * d + j] = gx[r * d + j] + v;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, dy, grads),
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(g) = self.slot(grads, p) {
                        axpy(T::one(), &dy[offset..offset + n], g);
                    }
                    offset += n;
                }
            }
            Op::RepeatRows { a, times } => {
                let n = self.value(*a).numel();
                if let Some(g) = self.slot(grads, *a) {
                    for t in 0..*times {
                        axpy(T::one(), &dy[t * n..(t + 1) * n], g);
                    }
                }
            }
            Op::SelectRows { a, rows } => {
                let d = self.value(*a).cols();
                if let Some(g) = self.slot(grads, *a) {
                    for (out_r, &src) in rows.iter().enumerate() {
                        axpy(T::one(), &dy[out_r * d..(out_r + 1) * d], &mut g[src * d..(src + 1) * d]);
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(g) = self.slot(grads, *a) {
                    for gi in g.iter_mut() {
                        *gi = *gi + dy[0];
                    }
                }
            }
            Op::Mean { a } => {
                let n = T::from_f64(self.value(*a).numel() as f64);
                if let Some(g) = self.slot(grads, *a) {
                    let s = dy[0] / n;
                    for gi in g.iter_mut() {
                        *gi = *gi + s;
                    }
                }
            }
            Op::L1 { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let s = dy[0] / T::from_f64(av.numel() as f64);
                // Subgradient of |0| is taken as 0.
                let sign: Vec<T> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| {
                        let diff = *x - *y;
                        if diff > T::zero() {
                            s
                        } else if diff < T::zero() {
                            -s
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if let Some(g) = self.slot(grads, *a) {
                    axpy(T::one(), &sign, g);
                }
                if let Some(g) = self.slot(grads, *b) {
                    axpy(-T::one(), &sign, g);
                }
            }
            Op::L2 { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let s = T::from_f64(2.0) * dy[0] / T::from_f64(av.numel() as f64);
                let diff: Vec<T> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| (*x - *y) * s)
                    .collect();
                if let Some(g) = self.slot(grads, *a) {
                    axpy(T::one(), &diff, g);
                }
                if let Some(g) = self.slot(grads, *b) {
                    axpy(-T::one(), &diff, g);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[T],
        dy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, lk, d) = (qv.rows(), kv.rows(), qv.cols());
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut dq = vec![T::zero(); lq * d];
        let mut dk = vec![T::zero(); lk * d];
        let mut dv = vec![T::zero(); lk * d];
        let mut dp = vec![T::zero(); lk];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..lq {
                let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let doi = &dy[i * d + h * dh..i * d + (h + 1) * dh];
                let mut weighted = T::zero();
                for j in 0..lk {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    dp[j] = dot(doi, &vv.row(j)[cols.clone()]);
                    weighted = weighted + p[j] * dp[j];
                    axpy(p[j], doi, &mut dv[j * d + h * dh..j * d + (h + 1) * dh]);
                }
                let qi = &qv.row(i)[cols.clone()];
                for j in 0..lk {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    axpy(ds, &kv.row(j)[cols.clone()], &mut dq[i * d + h * dh..i * d + (h + 1) * dh]);
                    axpy(ds, qi, &mut dk[j * d + h * dh..j * d + (h + 1) * dh]);
                }
            }
        }
        for (id, g) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = self.slot(grads, id) {
                axpy(T::one(), &g, slot);
            }
        }
    }

    /// Mutable gradient buffer for `id`, or `None` when it needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: NodeId) -> Option<&'g mut [T]> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let n = self.nodes[id.0].value.numel();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `node`; zeros when the node is
    /// not on any path to the loss.
    pub fn wrt(&self, graph: &Graph<T>, node: NodeId) -> Tensor<T> {
        let shape = graph.value(node).shape();
        match &self.grads[node.0] {
            Some(g) => Tensor::from_parts(shape.to_vec(), g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients for every parameter of `store`, aligned by id.
    pub fn param_grads(&self, graph: &Graph<T>, store: &ParamStore<T>) -> ParamGrads<T> {
        let mut out: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        for &(pid, node) in &graph.params {
            if let Some(g) = &self.grads[node.0] {
                out[pid.0] = Tensor::from_parts(store.get(pid).shape().to_vec(), g.clone());
            }
        }
        ParamGrads::from_vec(out)
    }
}
