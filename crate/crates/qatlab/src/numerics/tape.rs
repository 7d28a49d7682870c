//! Reverse-mode tape over a closed op set.
//!
//! A [`Graph`] is built eagerly (every builder computes its value on the
//! spot) and differentiated by a single reverse sweep. Nodes are appended
//! in topological order by construction, so the sweep visits each node
//! once, after all of its consumers. Intermediate gradients are dropped as
//! soon as they have been propagated; leaf gradients stay readable until
//! the next `backward` call.

use super::{axpy, dot, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    /// Elementwise sum of two same-shape tensors.
    Add(NodeId, NodeId),
    /// `x + gate * saved` with a one-element `gate`.
    GateAdd {
        x: NodeId,
        gate: NodeId,
        saved: NodeId,
    },
    /// `out[m,n] = x[m,k] · w[n,k]ᵀ`; weights are stored `[out, in]`.
    MatMulT { x: NodeId, w: NodeId },
    /// Row gather from `table` at `ids`.
    Embed { table: NodeId, ids: Vec<usize> },
    /// Row-wise RMS normalisation times a per-column gain.
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv_rms: Vec<T>,
    },
    /// `max(x, 0)²`.
    ReluSq(NodeId),
    /// Rotary position embedding over `[seq, n_heads * head_dim]` rows.
    Rope {
        x: NodeId,
        n_heads: usize,
        base: f64,
    },
    /// Causal grouped-query attention; `probs` keeps the softmax weights
    /// (`[n_q_heads, seq, seq]`, lower triangle) for the backward pass.
    Gqa {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_q_heads: usize,
        n_kv_heads: usize,
        probs: Vec<T>,
    },
    /// Mean negative log-likelihood over rows; `probs` is `[rows, vocab]`.
    CrossEntropyMean {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    /// Forward takes the surrogate's value; backward passes the gradient
    /// through to `x` unchanged.
    StraightThrough { x: NodeId },
}

pub struct Graph<T> {
    ops: Vec<Op<T>>,
    values: Vec<Tensor<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Tensor<T>>>,
}

fn ensure_grad<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    values: &[Tensor<T>],
    id: NodeId,
) -> &'a mut Tensor<T> {
    let slot = &mut grads[id.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(values[id.0].shape().to_vec()));
    }
    slot.as_mut().unwrap()
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            values: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Gradient accumulated at `id` by the last `backward` call. Present
    /// only for leaves that require gradients (and were reached).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires: bool) -> NodeId {
        self.ops.push(op);
        self.values.push(value);
        self.requires.push(requires);
        NodeId(self.ops.len() - 1)
    }

    fn req(&self, id: NodeId) -> bool {
        self.requires[id.0]
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::config(format!(
                "add: shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        for (o, x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += *x;
        }
        let r = self.req(a) || self.req(b);
        Ok(self.push(Op::Add(a, b), out, r))
    }

    pub fn gate_add(&mut self, x: NodeId, gate: NodeId, saved: NodeId) -> Result<NodeId> {
        let (vx, vg, vs) = (self.value(x), self.value(gate), self.value(saved));
        if vg.numel() != 1 {
            return Err(Error::config("gate_add: gate must hold one element"));
        }
        if vx.shape() != vs.shape() {
            return Err(Error::config(format!(
                "gate_add: shape mismatch {:?} vs {:?}",
                vx.shape(),
                vs.shape()
            )));
        }
        let gval = vg.data()[0];
        let mut out = vx.clone();
        axpy(out.data_mut(), gval, vs.data());
        let r = self.req(x) || self.req(gate) || self.req(saved);
        Ok(self.push(Op::GateAdd { x, gate, saved }, out, r))
    }

    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (m, k) = (vx.rows()?, vx.cols()?);
        let (n, kw) = (vw.rows()?, vw.cols()?);
        if k != kw {
            return Err(Error::config(format!(
                "matmul_t: inner dims differ ({k} vs {kw})"
            )));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        {
            let (xd, wd, od) = (vx.data(), vw.data(), out.data_mut());
            for i in 0..m {
                let xr = &xd[i * k..(i + 1) * k];
                let orow = &mut od[i * n..(i + 1) * n];
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = dot(xr, &wd[j * k..(j + 1) * k]);
                }
            }
        }
        let r = self.req(x) || self.req(w);
        Ok(self.push(Op::MatMulT { x, w }, out, r))
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let (rows, d) = (vt.rows()?, vt.cols()?);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::data(format!(
                "embed: id {bad} out of range for {rows} rows"
            )));
        }
        let mut out = Tensor::zeros(vec![ids.len(), d]);
        {
            let (td, od) = (vt.data(), out.data_mut());
            for (r, &id) in ids.iter().enumerate() {
                od[r * d..(r + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
            }
        }
        let r = self.req(table);
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            out,
            r,
        ))
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> Result<NodeId> {
        let (vx, vg) = (self.value(x), self.value(gain));
        let (m, d) = (vx.rows()?, vx.cols()?);
        if vg.numel() != d {
            return Err(Error::config(format!(
                "rms_norm: gain has {} elements for width {d}",
                vg.numel()
            )));
        }
        let mut inv_rms = Vec::with_capacity(m);
        let mut out = Tensor::zeros(vec![m, d]);
        {
            let (xd, gd, od) = (vx.data(), vg.data(), out.data_mut());
            for i in 0..m {
                let row = &xd[i * d..(i + 1) * d];
                let ms = dot(row, row).to_f64() / d as f64;
                let r = T::from_f64(1.0 / (ms + eps).sqrt());
                inv_rms.push(r);
                for j in 0..d {
                    od[i * d + j] = row[j] * r * gd[j];
                }
            }
        }
        let r = self.req(x) || self.req(gain);
        Ok(self.push(Op::RmsNorm { x, gain, inv_rms }, out, r))
    }

    pub fn relu_sq(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let mut out = vx.clone();
        for v in out.data_mut() {
            let p = v.maxs(T::ZERO);
            *v = p * p;
        }
        let r = self.req(x);
        self.push(Op::ReluSq(x), out, r)
    }

    pub fn rope(&mut self, x: NodeId, n_heads: usize, base: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let (seq, width) = (vx.rows()?, vx.cols()?);
        if n_heads == 0 || width % n_heads != 0 || !(width / n_heads).is_multiple_of(2) {
            return Err(Error::config(format!(
                "rope: width {width} must split into {n_heads} heads of even size"
            )));
        }
        let dh = width / n_heads;
        let table = rope_table::<T>(seq, dh, base);
        let mut out = vx.clone();
        rope_apply(out.data_mut(), seq, n_heads, dh, &table, false);
        let r = self.req(x);
        Ok(self.push(Op::Rope { x, n_heads, base }, out, r))
    }

    pub fn gqa_causal(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_q_heads: usize,
        n_kv_heads: usize,
    ) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (seq, qw) = (vq.rows()?, vq.cols()?);
        let (ks, kw) = (vk.rows()?, vk.cols()?);
        let (vs, vw) = (vv.rows()?, vv.cols()?);
        if n_q_heads == 0 || n_kv_heads == 0 || !n_q_heads.is_multiple_of(n_kv_heads) {
            return Err(Error::config(format!(
                "gqa: {n_q_heads} query heads must be a multiple of {n_kv_heads} kv heads"
            )));
        }
        if ks != seq || vs != seq {
            return Err(Error::config("gqa: q/k/v row counts differ"));
        }
        if qw % n_q_heads != 0 || kw % n_kv_heads != 0 || kw != vw {
            return Err(Error::config("gqa: widths do not split into heads"));
        }
        let dh = qw / n_q_heads;
        if kw / n_kv_heads != dh {
            return Err(Error::config(format!(
                "gqa: head size mismatch ({} vs {dh})",
                kw / n_kv_heads
            )));
        }
        let group = n_q_heads / n_kv_heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::ZERO; n_q_heads * seq * seq];
        let mut out = Tensor::zeros(vec![seq, qw]);
        {
            let (qd, kd, vd, od) = (vq.data(), vk.data(), vv.data(), out.data_mut());
            let mut scores = vec![T::ZERO; seq];
            for h in 0..n_q_heads {
                let kvh = h / group;
                for i in 0..seq {
                    let qr = &qd[i * qw + h * dh..i * qw + (h + 1) * dh];
                    let mut mx = T::from_f64(f64::NEG_INFINITY);
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        *s = dot(qr, &kd[j * kw + kvh * dh..j * kw + (kvh + 1) * dh]) * scale;
                        mx = mx.maxs(*s);
                    }
                    let mut denom = T::ZERO;
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - mx).exp();
                        denom += *s;
                    }
                    let orow = &mut od[i * qw + h * dh..i * qw + (h + 1) * dh];
                    let prow = &mut probs[(h * seq + i) * seq..(h * seq + i) * seq + i + 1];
                    for (j, p) in prow.iter_mut().enumerate() {
                        *p = scores[j] / denom;
                        axpy(orow, *p, &vd[j * kw + kvh * dh..j * kw + (kvh + 1) * dh]);
                    }
                }
            }
        }
        let r = self.req(q) || self.req(k) || self.req(v);
        Ok(self.push(
            Op::Gqa {
                q,
                k,
                v,
                n_q_heads,
                n_kv_heads,
                probs,
            },
            out,
            r,
        ))
    }

    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        let (m, vocab) = (vl.rows()?, vl.cols()?);
        if targets.len() != m {
            return Err(Error::config(format!(
                "cross_entropy: {} targets for {m} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::data(format!(
                "cross_entropy: target {bad} out of range for vocab {vocab}"
            )));
        }
        let mut probs = vec![T::ZERO; m * vocab];
        let mut nll_sum = 0.0f64;
        {
            let ld = vl.data();
            for i in 0..m {
                let row = &ld[i * vocab..(i + 1) * vocab];
                let mut mx = row[0];
                for &x in row.iter().skip(1) {
                    mx = mx.maxs(x);
                }
                let mut denom = 0.0f64;
                let prow = &mut probs[i * vocab..(i + 1) * vocab];
                for (p, &x) in prow.iter_mut().zip(row) {
                    *p = (x - mx).exp();
                    denom += p.to_f64();
                }
                let inv = T::from_f64(1.0 / denom);
                for p in prow.iter_mut() {
                    *p = *p * inv;
                }
                nll_sum += denom.ln() - (row[targets[i]] - mx).to_f64();
            }
        }
        let loss = Tensor::scalar(T::from_f64(nll_sum / m as f64));
        let r = self.req(logits);
        Ok(self.push(
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            loss,
            r,
        ))
    }

    pub fn straight_through(&mut self, x: NodeId, surrogate: Tensor<T>) -> Result<NodeId> {
        if self.value(x).shape() != surrogate.shape() {
            return Err(Error::config(format!(
                "straight_through: shape mismatch {:?} vs {:?}",
                self.value(x).shape(),
                surrogate.shape()
            )));
        }
        let r = self.req(x);
        Ok(self.push(Op::StraightThrough { x }, surrogate, r))
    }

    /// Reverse sweep from `root`, seeding every element of its gradient
    /// with `seed`. Leaf gradients from any previous sweep are cleared.
    pub fn backward(&mut self, root: NodeId, seed: f64) -> Result<()> {
        if !self.requires[root.0] {
            return Err(Error::config(
                "backward: root does not depend on any gradient-tracked leaf",
            ));
        }
        self.grads = (0..self.ops.len()).map(|_| None).collect();
        let mut g0 = Tensor::zeros(self.values[root.0].shape().to_vec());
        for v in g0.data_mut() {
            *v = T::from_f64(seed);
        }
        self.grads[root.0] = Some(g0);

        for idx in (0..=root.0).rev() {
            if matches!(self.ops[idx], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            let values = &self.values;
            let requires = &self.requires;
            let grads = &mut self.grads;
            match &self.ops[idx] {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    for inp in [*a, *b] {
                        if requires[inp.0] {
                            axpy(ensure_grad(grads, values, inp).data_mut(), T::ONE, g.data());
                        }
                    }
                }
                Op::GateAdd { x, gate, saved } => {
                    if requires[x.0] {
                        axpy(ensure_grad(grads, values, *x).data_mut(), T::ONE, g.data());
                    }
                    if requires[saved.0] {
                        let gv = values[gate.0].data()[0];
                        axpy(ensure_grad(grads, values, *saved).data_mut(), gv, g.data());
                    }
                    if requires[gate.0] {
                        let d = dot(g.data(), values[saved.0].data());
                        ensure_grad(grads, values, *gate).data_mut()[0] += d;
                    }
                }
                Op::MatMulT { x, w } => {
                    let (m, k) = (values[x.0].shape()[0], values[x.0].shape()[1]);
                    let n = values[w.0].shape()[0];
                    let gd = g.data();
                    if requires[x.0] {
                        let wd = values[w.0].data();
                        let dx = ensure_grad(grads, values, *x).data_mut();
                        for i in 0..m {
                            let grow = &gd[i * n..(i + 1) * n];
                            let drow = &mut dx[i * k..(i + 1) * k];
                            for (j, &gij) in grow.iter().enumerate() {
                                axpy(drow, gij, &wd[j * k..(j + 1) * k]);
                            }
                        }
                    }
                    if requires[w.0] {
                        let xd = values[x.0].data();
                        let dw = ensure_grad(grads, values, *w).data_mut();
                        for i in 0..m {
                            let grow = &gd[i * n..(i + 1) * n];
                            let xrow = &xd[i * k..(i + 1) * k];
                            for (j, &gij) in grow.iter().enumerate() {
                                axpy(&mut dw[j * k..(j + 1) * k], gij, xrow);
                            }
                        }
                    }
                }
                Op::Embed { table, ids } => {
                    if requires[table.0] {
                        let d = values[table.0].shape()[1];
                        let dt = ensure_grad(grads, values, *table).data_mut();
                        for (r, &id) in ids.iter().enumerate() {
                            axpy(
                                &mut dt[id * d..(id + 1) * d],
                                T::ONE,
                                &g.data()[r * d..(r + 1) * d],
                            );
                        }
                    }
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (m, d) = (values[x.0].shape()[0], values[x.0].shape()[1]);
                    let gd = g.data();
                    if requires[gain.0] {
                        let xd = values[x.0].data();
                        let dg = ensure_grad(grads, values, *gain).data_mut();
                        for i in 0..m {
                            let r = inv_rms[i];
                            for j in 0..d {
                                dg[j] += gd[i * d + j] * xd[i * d + j] * r;
                            }
                        }
                    }
                    if requires[x.0] {
                        let xd = values[x.0].data();
                        let gs = values[gain.0].data();
                        let dx = ensure_grad(grads, values, *x).data_mut();
                        let inv_d = T::from_f64(1.0 / d as f64);
                        for i in 0..m {
                            let r = inv_rms[i];
                            let xrow = &xd[i * d..(i + 1) * d];
                            let grow = &gd[i * d..(i + 1) * d];
                            let mut h = T::ZERO;
                            for j in 0..d {
                                h += grow[j] * gs[j] * xrow[j];
                            }
                            let c = r * r * r * h * inv_d;
                            let drow = &mut dx[i * d..(i + 1) * d];
                            for j in 0..d {
                                drow[j] += r * gs[j] * grow[j] - c * xrow[j];
                            }
                        }
                    }
                }
                Op::ReluSq(x) => {
                    if requires[x.0] {
                        let two = T::from_f64(2.0);
                        let xd = values[x.0].data();
                        let dx = ensure_grad(grads, values, *x).data_mut();
                        for ((dv, &xv), &gv) in dx.iter_mut().zip(xd).zip(g.data()) {
                            *dv += two * xv.maxs(T::ZERO) * gv;
                        }
                    }
                }
                Op::Rope { x, n_heads, base } => {
                    if requires[x.0] {
                        let (seq, width) = (values[x.0].shape()[0], values[x.0].shape()[1]);
                        let dh = width / n_heads;
                        let table = rope_table::<T>(seq, dh, *base);
                        let mut gx = g.clone();
                        rope_apply(gx.data_mut(), seq, *n_heads, dh, &table, true);
                        axpy(ensure_grad(grads, values, *x).data_mut(), T::ONE, gx.data());
                    }
                }
                Op::Gqa {
                    q,
                    k,
                    v,
                    n_q_heads,
                    n_kv_heads,
                    probs,
                } => {
                    gqa_backward(
                        &g, *q, *k, *v, *n_q_heads, *n_kv_heads, probs, values, requires, grads,
                    );
                }
                Op::CrossEntropyMean {
                    logits,
                    targets,
                    probs,
                } => {
                    if requires[logits.0] {
                        let (m, vocab) =
                            (values[logits.0].shape()[0], values[logits.0].shape()[1]);
                        let scale = g.data()[0] * T::from_f64(1.0 / m as f64);
                        let dl = ensure_grad(grads, values, *logits).data_mut();
                        for i in 0..m {
                            let prow = &probs[i * vocab..(i + 1) * vocab];
                            let drow = &mut dl[i * vocab..(i + 1) * vocab];
                            for (dv, &p) in drow.iter_mut().zip(prow) {
                                *dv += scale * p;
                            }
                            drow[targets[i]] += -scale;
                        }
                    }
                }
                Op::StraightThrough { x } => {
                    if requires[x.0] {
                        axpy(ensure_grad(grads, values, *x).data_mut(), T::ONE, g.data());
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-(position, pair) cos/sin table shared by all heads.
fn rope_table<T: Scalar>(seq: usize, head_dim: usize, base: f64) -> Vec<(T, T)> {
    let half = head_dim / 2;
    let mut table = Vec::with_capacity(seq * half);
    for pos in 0..seq {
        for i in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
            table.push((T::from_f64(theta.cos()), T::from_f64(theta.sin())));
        }
    }
    table
}

/// Rotates pairs in place; `inverse` flips the rotation sign (the
/// transpose of an orthogonal map, which is exactly the backward pass).
fn rope_apply<T: Scalar>(
    data: &mut [T],
    seq: usize,
    n_heads: usize,
    head_dim: usize,
    table: &[(T, T)],
    inverse: bool,
) {
    let half = head_dim / 2;
    let width = n_heads * head_dim;
    for pos in 0..seq {
        for h in 0..n_heads {
            let off = pos * width + h * head_dim;
            for i in 0..half {
                let (c, s) = table[pos * half + i];
                let s = if inverse { -s } else { s };
                let a = data[off + 2 * i];
                let b = data[off + 2 * i + 1];
                data[off + 2 * i] = a * c - b * s;
                data[off + 2 * i + 1] = a * s + b * c;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gqa_backward<T: Scalar>(
    g: &Tensor<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    n_q_heads: usize,
    n_kv_heads: usize,
    probs: &[T],
    values: &[Tensor<T>],
    requires: &[bool],
    grads: &mut [Option<Tensor<T>>],
) {
    if !(requires[q.0] || requires[k.0] || requires[v.0]) {
        return;
    }
    let (seq, qw) = (values[q.0].shape()[0], values[q.0].shape()[1]);
    let kw = values[k.0].shape()[1];
    let dh = qw / n_q_heads;
    let group = n_q_heads / n_kv_heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let qd = values[q.0].data();
    let kd = values[k.0].data();
    let vd = values[v.0].data();
    let gd = g.data();
    let mut dq = vec![T::ZERO; qd.len()];
    let mut dk = vec![T::ZERO; kd.len()];
    let mut dv = vec![T::ZERO; vd.len()];
    let mut dp = vec![T::ZERO; seq];
    for h in 0..n_q_heads {
        let kvh = h / group;
        for i in 0..seq {
            let grow = &gd[i * qw + h * dh..i * qw + (h + 1) * dh];
            let prow = &probs[(h * seq + i) * seq..(h * seq + i) * seq + i + 1];
            let mut dot_sum = T::ZERO;
            for (j, (&p, dpj)) in prow.iter().zip(dp.iter_mut()).enumerate() {
                let vslice = &vd[j * kw + kvh * dh..j * kw + (kvh + 1) * dh];
                *dpj = dot(grow, vslice);
                dot_sum += p * *dpj;
                axpy(&mut dv[j * kw + kvh * dh..j * kw + (kvh + 1) * dh], p, grow);
            }
            let qrow = &qd[i * qw + h * dh..i * qw + (h + 1) * dh];
            for (j, &p) in prow.iter().enumerate() {
                let ds = p * (dp[j] - dot_sum) * scale;
                axpy(
                    &mut dq[i * qw + h * dh..i * qw + (h + 1) * dh],
                    ds,
                    &kd[j * kw + kvh * dh..j * kw + (kvh + 1) * dh],
                );
                axpy(&mut dk[j * kw + kvh * dh..j * kw + (kvh + 1) * dh], ds, qrow);
            }
        }
    }
    if requires[q.0] {
        axpy(ensure_grad(grads, values, q).data_mut(), T::ONE, &dq);
    }
    if requires[k.0] {
        axpy(ensure_grad(grads, values, k).data_mut(), T::ONE, &dk);
    }
    if requires[v.0] {
        axpy(ensure_grad(grads, values, v).data_mut(), T::ONE, &dv);
    }
}
