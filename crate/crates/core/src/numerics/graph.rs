//! Reverse-mode differentiation over row-major matrices.
//!
//! Sequences from a whole batch are packed row-wise into one matrix; position-wise
//! ops run over all rows at once and attention is told where each sequence lives
//! through [`Segment`]s, so there is no padding anywhere.

use std::borrow::Cow;

use super::{gemm, gemm_strided, Tensor};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Placement of one sequence's queries and keys inside packed matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

enum Op {
    Input,
    MatMul { a: NodeId, b: NodeId, b_trans: bool },
    Add { a: NodeId, b: NodeId },
    AddRow { x: NodeId, bias: NodeId },
    Scale { x: NodeId, s: f64 },
    Gelu { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: NodeId, k: NodeId, v: NodeId, segs: Vec<Segment>, heads: usize, probs: Vec<Vec<f64>> },
    LogSoftmax { x: NodeId },
    Gather { table: NodeId, ids: Vec<usize> },
    Dropout { x: NodeId, mask: Vec<f64> },
    /// Scalar computed outside the tape along with its gradient w.r.t. `x`.
    External { x: NodeId, grad: Tensor },
    WeightedSum { terms: Vec<(NodeId, f64)> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A recorded forward computation.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of one scalar root with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id].take()
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A leaf that receives a gradient (a trainable parameter).
    pub fn param(&mut self, t: &'a Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Input,
            needs_grad: true,
        });
        self.nodes.len() - 1
    }

    /// A leaf treated as constant.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Input,
            needs_grad: false,
        });
        self.nodes.len() - 1
    }

    /// `a · b` or `a · bᵀ`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, b_trans: bool) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (kb, n) = if b_trans {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        assert_eq!(k, kb, "matmul inner extents differ");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), b_trans, &mut out, false);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::matrix(m, n, out), Op::MatMul { a, b, b_trans }, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add { a, b }, ng)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data();
        assert_eq!(out.cols(), bv.len());
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv) {
                *o += b;
            }
        }
        let ng = self.ng(&[x, bias]);
        self.push(out, Op::AddRow { x, bias }, ng)
    }

    /// `x · W + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let h = self.matmul(x, w, false);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale { x, s }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let x = *v;
            let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
            *v = 0.5 * x * (1.0 + t);
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu { x }, ng)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        self.push(
            Tensor::matrix(rows, cols, out),
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// With `causal`, query `i` of a segment sees keys `0..=i` of the same segment.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segs: &[Segment],
        heads: usize,
        causal: bool,
    ) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert!(d % heads == 0 && kv.cols() == d && vv.cols() == d);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; qv.rows() * d];
        let mut probs = Vec::with_capacity(segs.len() * heads);
        for s in segs {
            let (ql, kl) = (s.q_len, s.k_len);
            for h in 0..heads {
                let mut p = vec![0.0; ql * kl];
                gemm_strided(
                    ql,
                    dh,
                    kl,
                    &qv.data()[s.q_start * d + h * dh..],
                    (d, 1),
                    &kv.data()[s.k_start * d + h * dh..],
                    (1, d),
                    &mut p,
                    (kl, 1),
                    false,
                );
                for i in 0..ql {
                    let row = &mut p[i * kl..(i + 1) * kl];
                    let visible = if causal { (i + 1).min(kl) } else { kl };
                    let mut max = f64::NEG_INFINITY;
                    for x in row[..visible].iter_mut() {
                        *x *= scale;
                        max = max.max(*x);
                    }
                    let mut sum = 0.0;
                    for x in row[..visible].iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    for x in row[..visible].iter_mut() {
                        *x /= sum;
                    }
                    row[visible..].iter_mut().for_each(|x| *x = 0.0);
                }
                gemm_strided(
                    ql,
                    kl,
                    dh,
                    &p,
                    (kl, 1),
                    &vv.data()[s.k_start * d + h * dh..],
                    (d, 1),
                    &mut out[s.q_start * d + h * dh..],
                    (d, 1),
                    false,
                );
                probs.push(p);
            }
        }
        let rows = qv.rows();
        let ng = self.ng(&[q, k, v]);
        self.push(
            Tensor::matrix(rows, d, out),
            Op::Attention { q, k, v, segs: segs.to_vec(), heads, probs },
            ng,
        )
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = super::logsumexp_unchecked(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::LogSoftmax { x }, ng)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = self.value(table);
        let cols = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let ng = self.ng(&[table]);
        self.push(
            Tensor::matrix(ids.len(), cols, out),
            Op::Gather { table, ids: ids.to_vec() },
            ng,
        )
    }

    /// Elementwise multiply by a precomputed mask (zeros and `1/(1-p)`).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let mut out = self.value(x).clone();
        assert_eq!(out.len(), mask.len());
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Records a scalar whose gradient with respect to `x` was computed elsewhere.
    pub fn external_loss(&mut self, x: NodeId, value: f64, grad: Tensor) -> NodeId {
        assert_eq!(grad.shape(), self.value(x).shape());
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(value), Op::External { x, grad }, ng)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes, accumulated left to right.
    ///
    /// Zero-weight terms contribute to the value but receive no gradient.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut acc = 0.0;
        for (i, &(id, w)) in terms.iter().enumerate() {
            let t = w * self.scalar(id);
            acc = if i == 0 { t } else { acc + t };
        }
        let ids: Vec<NodeId> = terms.iter().filter(|t| t.1 != 0.0).map(|t| t.0).collect();
        let ng = self.ng(&ids);
        self.push(
            Tensor::scalar(acc),
            Op::WeightedSum { terms: terms.to_vec() },
            ng,
        )
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for id in (0..=root).rev() {
            let Some(dy) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Gradients { grads }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], id: NodeId) -> Option<&'g mut Tensor> {
        if !self.nodes[id].needs_grad {
            return None;
        }
        let shape = self.value(id).shape();
        Some(grads[id].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn propagate(&self, id: NodeId, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Input => {}
            &Op::MatMul { a, b, b_trans } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows(), av.cols(), out.cols());
                if let Some(ga) = self.slot(grads, a) {
                    // dA = dY · Bᵀ  (or dY · B when B was used transposed)
                    gemm(m, n, k, dy.data(), false, bv.data(), !b_trans, ga.data_mut(), true);
                }
                if let Some(gb) = self.slot(grads, b) {
                    if b_trans {
                        // d(Bᵀ) = Aᵀ·dY  =>  dB = dYᵀ·A
                        gemm(n, m, k, dy.data(), true, av.data(), false, gb.data_mut(), true);
                    } else {
                        gemm(k, m, n, av.data(), true, dy.data(), false, gb.data_mut(), true);
                    }
                }
            }
            &Op::Add { a, b } => {
                for x in [a, b] {
                    if let Some(g) = self.slot(grads, x) {
                        g.add_assign(dy);
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                if let Some(g) = self.slot(grads, x) {
                    g.add_assign(dy);
                }
                if let Some(g) = self.slot(grads, bias) {
                    let gd = g.data_mut();
                    for r in 0..dy.rows() {
                        for (gi, d) in gd.iter_mut().zip(dy.row(r)) {
                            *gi += d;
                        }
                    }
                }
            }
            &Op::Scale { x, s } => {
                if let Some(g) = self.slot(grads, x) {
                    for (gi, d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *gi += s * d;
                    }
                }
            }
            &Op::Gelu { x } => {
                let xv = self.value(x).data();
                if let Some(g) = self.slot(grads, x) {
                    for ((gi, d), &x) in g.data_mut().iter_mut().zip(dy.data()).zip(xv) {
                        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *gi += d * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (rows, cols) = (dy.rows(), dy.cols());
                let gv = self.value(*gain).data();
                if let Some(g) = self.slot(grads, *gain) {
                    let gd = g.data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            gd[c] += dy.data()[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(g) = self.slot(grads, *bias) {
                    let gd = g.data_mut();
                    for r in 0..rows {
                        for (gi, d) in gd.iter_mut().zip(dy.row(r)) {
                            *gi += d;
                        }
                    }
                }
                if let Some(g) = self.slot(grads, *x) {
                    let gd = g.data_mut();
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let v = dy.data()[r * cols + c] * gv[c];
                            dxhat[c] = v;
                            mean_d += v;
                            mean_dx += v * xhat[r * cols + c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            gd[r * cols + c] +=
                                rstd[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, segs, heads, probs } => {
                self.attention_backward(*q, *k, *v, segs, *heads, probs, dy, grads)
            }
            &Op::LogSoftmax { x } => {
                if let Some(g) = self.slot(grads, x) {
                    for r in 0..dy.rows() {
                        let dsum: f64 = dy.row(r).iter().sum();
                        let yr = out.row(r);
                        for ((gi, d), y) in g.row_mut(r).iter_mut().zip(dy.row(r)).zip(yr) {
                            *gi += d - y.exp() * dsum;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(g) = self.slot(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        for (gi, d) in g.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *gi += d;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(g) = self.slot(grads, *x) {
                    for ((gi, d), m) in g.data_mut().iter_mut().zip(dy.data()).zip(mask) {
                        *gi += d * m;
                    }
                }
            }
            Op::External { x, grad } => {
                let up = dy.data()[0];
                if let Some(g) = self.slot(grads, *x) {
                    for (gi, d) in g.data_mut().iter_mut().zip(grad.data()) {
                        *gi += up * d;
                    }
                }
            }
            Op::WeightedSum { terms } => {
                let up = dy.data()[0];
                for &(t, w) in terms {
                    if w == 0.0 {
                        continue;
                    }
                    if let Some(g) = self.slot(grads, t) {
                        g.data_mut()[0] += w * up;
                    }
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
        segs: &[Segment],
        heads: usize,
        probs: &[Vec<f64>],
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = self.nodes[q].needs_grad.then(|| Tensor::zeros(qv.shape()));
        let mut dk = self.nodes[k].needs_grad.then(|| Tensor::zeros(kv.shape()));
        let mut dv = self.nodes[v].needs_grad.then(|| Tensor::zeros(vv.shape()));
        let mut pi = 0;
        for s in segs {
            let (ql, kl) = (s.q_len, s.k_len);
            let qo = s.q_start * d;
            let ko = s.k_start * d;
            for h in 0..heads {
                let p = &probs[pi];
                pi += 1;
                if let Some(dv) = dv.as_mut() {
                    // dV = Pᵀ · dO
                    gemm_strided(
                        kl,
                        ql,
                        dh,
                        p,
                        (1, kl),
                        &dy.data()[qo + h * dh..],
                        (d, 1),
                        &mut dv.data_mut()[ko + h * dh..],
                        (d, 1),
                        true,
                    );
                }
                if dq.is_none() && dk.is_none() {
                    continue;
                }
                // dP = dO · Vᵀ
                let mut ds = vec![0.0; ql * kl];
                gemm_strided(
                    ql,
                    dh,
                    kl,
                    &dy.data()[qo + h * dh..],
                    (d, 1),
                    &vv.data()[ko + h * dh..],
                    (1, d),
                    &mut ds,
                    (kl, 1),
                    false,
                );
                for i in 0..ql {
                    let pr = &p[i * kl..(i + 1) * kl];
                    let dr = &mut ds[i * kl..(i + 1) * kl];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (x, pv) in dr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                if let Some(dq) = dq.as_mut() {
                    gemm_strided(
                        ql,
                        kl,
                        dh,
                        &ds,
                        (kl, 1),
                        &kv.data()[ko + h * dh..],
                        (d, 1),
                        &mut dq.data_mut()[qo + h * dh..],
                        (d, 1),
                        true,
                    );
                }
                if let Some(dk) = dk.as_mut() {
                    gemm_strided(
                        kl,
                        ql,
                        dh,
                        &ds,
                        (1, kl),
                        &qv.data()[qo + h * dh..],
                        (d, 1),
                        &mut dk.data_mut()[ko + h * dh..],
                        (d, 1),
                        true,
                    );
                }
            }
        }
        for (id, t) in [(q, dq), (k, dk), (v, dv)] {
            if let (Some(t), Some(g)) = (t, self.slot(grads, id)) {
                g.add_assign(&t);
            }
        }
    }
}
