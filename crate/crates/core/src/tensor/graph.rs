//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built once per forward pass. Every op appends a node holding
//! its output value and whatever it needs for the backward sweep; nodes are
//! never mutated after creation. [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients for every node that (transitively) depends on a
//! leaf marked as requiring a gradient.

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Prelu {
        input: NodeId,
        slope: NodeId,
    },
    Softmax {
        input: NodeId,
        axis: usize,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        size: usize,
        cols: Vec<f64>,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    AxialScores {
        query: NodeId,
        key: NodeId,
        scale: f64,
    },
    AxialApply {
        weights: NodeId,
        value: NodeId,
    },
    Sum(NodeId),
    WeightedSum {
        input: NodeId,
        weights: Vec<f64>,
    },
    HalfSquaredError {
        pred: NodeId,
        target: NodeId,
        norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch-norm node whose batch statistics feed a pair of running-stat buffers.
#[derive(Clone, Copy, Debug)]
pub(crate) struct StatRecord {
    pub node: NodeId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(ParamId, NodeId)>,
    stat_records: Vec<StatRecord>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Leaf that receives a gradient iff `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: Tensor) -> Result<NodeId> {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg, "input")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Result<NodeId> {
        self.push(tensor, Op::Leaf, false, "constant")
    }

    /// Binds a stored parameter as a leaf. Repeated binds reuse the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&(_, node)) = self.bindings.iter().find(|(p, _)| *p == id) {
            return Ok(node);
        }
        let p = store.get(id);
        let mut value = Tensor::new(p.value.dims(), p.value.data().to_vec())?;
        value.set_requires_grad(p.is_optimized());
        let rg = value.requires_grad();
        let node = self.push(value, Op::Leaf, rg, &p.name)?;
        self.bindings.push((id, node));
        Ok(node)
    }

    pub(crate) fn record_stats(&mut self, rec: StatRecord) {
        self.stat_records.push(rec);
    }

    /// Blends the batch statistics of every train-mode batch norm into its
    /// running buffers: `running = (1 - momentum) * running + momentum * batch`.
    /// The running variance uses the unbiased batch variance.
    pub fn commit_running_stats(&self, store: &mut ParamStore, momentum: f64) {
        for rec in &self.stat_records {
            let node = &self.nodes[rec.node.0];
            if let Op::BatchNorm {
                mean,
                var,
                mode: BnMode::Train,
                input,
                ..
            } = &node.op
            {
                let dims = self.nodes[input.0].value.dims();
                let count = (dims.iter().product::<usize>() / dims[1]) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let rm = store.value_mut(rec.running_mean).data_mut();
                for (r, m) in rm.iter_mut().zip(mean) {
                    *r = (1.0 - momentum) * *r + momentum * m;
                }
                let rv = store.value_mut(rec.running_var).data_mut();
                for (r, v) in rv.iter_mut().zip(var) {
                    *r = (1.0 - momentum) * *r + momentum * v * unbias;
                }
            }
        }
    }

    /// Adds the gradients of every bound parameter into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for &(pid, node) in &self.bindings {
            if let Some(g) = &self.grads[node.0] {
                store.value_mut(pid).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims(a, b, "add")?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.dims(), data)?;
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims(a, b, "sub")?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.dims(), data)?;
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let out = Tensor::new(va.dims(), va.data().iter().map(|x| x * factor).collect())?;
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), rg, "scale")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let out = Tensor::new(va.dims(), va.data().iter().map(|&x| x.max(0.0)).collect())?;
        let rg = self.needs(&[a]);
        self.push(out, Op::Relu(a), rg, "relu")
    }

    /// `x` for `x >= 0`, `slope * x` otherwise; `slope` is a one-element node.
    pub fn prelu(&mut self, input: NodeId, slope: NodeId) -> Result<NodeId> {
        let s = &self.nodes[slope.0].value;
        if s.numel() != 1 {
            return dim_err(format!("prelu slope must have one element, has {}", s.numel()));
        }
        let a = s.data()[0];
        let vx = &self.nodes[input.0].value;
        let data = vx.data().iter().map(|&x| if x >= 0.0 { x } else { a * x }).collect();
        let out = Tensor::new(vx.dims(), data)?;
        let rg = self.needs(&[input, slope]);
        self.push(out, Op::Prelu { input, slope }, rg, "prelu")
    }

    pub fn softmax(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let vx = &self.nodes[input.0].value;
        if axis >= vx.ndim() {
            return dim_err(format!("softmax axis {axis} for dims {:?}", vx.dims()));
        }
        let (outer, len, inner) = split_axis(vx.dims(), axis);
        let x = vx.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        let out = Tensor::new(vx.dims(), y)?;
        let rg = self.needs(&[input]);
        self.push(out, Op::Softmax { input, axis }, rg, "softmax")
    }

    /// Stride-1 convolution with zero "same" padding.
    ///
    /// `input` is `[N, C_in, H, W]`, `kernel` is `[C_out, C_in, S, S]` with odd
    /// `S`, `bias` (optional) is `[C_out]`. Output is `[N, C_out, H, W]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let xd = self.nodes[input.0].value.dims().to_vec();
        let kd = self.nodes[kernel.0].value.dims().to_vec();
        if xd.len() != 4 || kd.len() != 4 {
            return dim_err(format!("conv2d expects 4-d input and kernel, got {xd:?} and {kd:?}"));
        }
        let (n, c_in, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (c_out, kc, s) = (kd[0], kd[1], kd[2]);
        if kc != c_in {
            return dim_err(format!("conv2d input has {c_in} channels, kernel expects {kc}"));
        }
        if kd[3] != s || s % 2 == 0 {
            return dim_err(format!("conv2d kernel must be square with odd size, got {kd:?}"));
        }
        if let Some(b) = bias {
            let bd = self.nodes[b.0].value.dims();
            if bd != [c_out] {
                return dim_err(format!("conv2d bias dims {bd:?}, expected [{c_out}]"));
            }
        }
        let hw = h * w;
        let rows = c_in * s * s;
        let x = self.nodes[input.0].value.data();
        let k = self.nodes[kernel.0].value.data();
        let bv = bias.map(|b| self.nodes[b.0].value.data());
        let mut cols = vec![0.0; rows * n * hw];
        let mut y = vec![0.0; n * c_out * hw];
        for (start, count) in chunks(n, hw) {
            // Samples start..start+count side by side: block[rows, count * hw].
            let ld = count * hw;
            let block = &mut cols[start * rows * hw..(start + count) * rows * hw];
            for b in 0..count {
                let xb = &x[(start + b) * c_in * hw..(start + b + 1) * c_in * hw];
                im2col(xb, c_in, h, w, s, block, ld, b * hw);
            }
            let mut wide = vec![0.0; c_out * ld];
            gemm(c_out, rows, ld, k, (rows, 1), block, (ld, 1), 0.0, &mut wide, (ld, 1));
            for b in 0..count {
                for co in 0..c_out {
                    let src = &wide[co * ld + b * hw..co * ld + (b + 1) * hw];
                    let at = ((start + b) * c_out + co) * hw;
                    let add = bv.map_or(0.0, |v| v[co]);
                    for (d, v) in y[at..at + hw].iter_mut().zip(src) {
                        *d = v + add;
                    }
                }
            }
        }
        let out = Tensor::new(&[n, c_out, h, w], y)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.needs(&deps);
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                size: s,
                cols,
            },
            rg,
            "conv2d",
        )
    }

    /// Per-channel batch normalization over every axis except axis 1.
    ///
    /// Train mode normalizes with the batch statistics; eval mode uses the
    /// supplied running statistics.
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        running: Option<(&[f64], &[f64])>,
        epsilon: f64,
    ) -> Result<NodeId> {
        let xd = self.nodes[input.0].value.dims().to_vec();
        if xd.len() < 2 {
            return dim_err(format!("batchnorm expects at least 2 dims, got {xd:?}"));
        }
        let c = xd[1];
        for p in [gamma, beta] {
            if self.nodes[p.0].value.dims() != [c] {
                return dim_err(format!(
                    "batchnorm affine dims {:?}, expected [{c}]",
                    self.nodes[p.0].value.dims()
                ));
            }
        }
        let n = xd[0];
        let inner: usize = xd[2..].iter().product();
        let count = n * inner;
        let x = self.nodes[input.0].value.data();
        let (mean, var) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::Precondition(format!(
                        "train-mode batchnorm needs at least 2 values per channel, has {count}"
                    )));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        acc += x[base..base + inner].iter().sum::<f64>();
                    }
                    let m = acc / count as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        sq += x[base..base + inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count as f64;
                }
                (mean, var)
            }
            BnMode::Eval => {
                let (m, v) = running
                    .ok_or_else(|| Error::Precondition("eval-mode batchnorm requires running statistics".into()))?;
                if m.len() != c || v.len() != c {
                    return dim_err("running statistics length differs from channel count");
                }
                (m.to_vec(), v.to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let g = self.nodes[gamma.0].value.data();
        let be = self.nodes[beta.0].value.data();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    y[i] = g[ch] * xh + be[ch];
                }
            }
        }
        let out = Tensor::new(&xd, y)?;
        let rg = self.needs(&[input, gamma, beta]);
        self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
                mean,
                var,
            },
            rg,
            "batchnorm",
        )
    }

    /// Batch statistics `(mean, biased variance)` of a train-mode batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                mean,
                var,
                mode: BnMode::Train,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    /// Attention logits along the last axis, computed independently for every
    /// position of axis 2.
    ///
    /// `query`, `key`: `[N, D, R, L]`. Output `[N, R, L, L]` with
    /// `out[n, r, i, j] = scale * sum_d query[n, d, r, i] * key[n, d, r, j]`.
    pub fn axial_scores(&mut self, query: NodeId, key: NodeId, scale: f64) -> Result<NodeId> {
        let qd = self.nodes[query.0].value.dims().to_vec();
        let kd = self.nodes[key.0].value.dims();
        if qd.len() != 4 || qd != kd {
            return dim_err(format!("axial_scores needs equal 4-d query/key, got {qd:?} and {kd:?}"));
        }
        let (n, d, r, l) = (qd[0], qd[1], qd[2], qd[3]);
        let q = self.nodes[query.0].value.data();
        let k = self.nodes[key.0].value.data();
        let mut s = vec![0.0; n * r * l * l];
        for b in 0..n {
            for row in 0..r {
                let out = &mut s[(b * r + row) * l * l..(b * r + row + 1) * l * l];
                for c in 0..d {
                    let base = ((b * d + c) * r + row) * l;
                    let qr = &q[base..base + l];
                    let kr = &k[base..base + l];
                    for i in 0..l {
                        let qi = qr[i] * scale;
                        let o = &mut out[i * l..(i + 1) * l];
                        for j in 0..l {
                            o[j] += qi * kr[j];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[n, r, l, l], s)?;
        let rg = self.needs(&[query, key]);
        self.push(out, Op::AxialScores { query, key, scale }, rg, "axial_scores")
    }

    /// Applies `[N, R, L, L]` attention weights to `[N, D, R, L]` values:
    /// `out[n, d, r, i] = sum_j weights[n, r, i, j] * value[n, d, r, j]`.
    pub fn axial_apply(&mut self, weights: NodeId, value: NodeId) -> Result<NodeId> {
        let wd = self.nodes[weights.0].value.dims().to_vec();
        let vd = self.nodes[value.0].value.dims().to_vec();
        if wd.len() != 4 || vd.len() != 4 || wd[0] != vd[0] || wd[1] != vd[2] || wd[2] != vd[3] || wd[3] != vd[3] {
            return dim_err(format!("axial_apply weights {wd:?} incompatible with values {vd:?}"));
        }
        let (n, d, r, l) = (vd[0], vd[1], vd[2], vd[3]);
        let s = self.nodes[weights.0].value.data();
        let v = self.nodes[value.0].value.data();
        let mut o = vec![0.0; v.len()];
        for b in 0..n {
            for row in 0..r {
                let sw = &s[(b * r + row) * l * l..(b * r + row + 1) * l * l];
                for c in 0..d {
                    let base = ((b * d + c) * r + row) * l;
                    let vr = &v[base..base + l];
                    for i in 0..l {
                        let srow = &sw[i * l..(i + 1) * l];
                        o[base + i] = srow.iter().zip(vr).map(|(a, b)| a * b).sum();
                    }
                }
            }
        }
        let out = Tensor::new(&vd, o)?;
        let rg = self.needs(&[weights, value]);
        self.push(out, Op::AxialApply { weights, value }, rg, "axial_apply")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.nodes[a.0].value.data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg, "sum")
    }

    /// Scalar `sum_i weights[i] * input[i]`.
    pub fn weighted_sum(&mut self, input: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        let x = self.nodes[input.0].value.data();
        if x.len() != weights.len() {
            return dim_err(format!(
                "weighted_sum of {} values with {} weights",
                x.len(),
                weights.len()
            ));
        }
        let total = x.iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.needs(&[input]);
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum { input, weights },
            rg,
            "weighted_sum",
        )
    }

    /// `sum((pred - target)^2) / (2 * batch)` where batch is the leading dim.
    pub fn half_mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_dims(pred, target, "half_mse")?;
        let p = self.nodes[pred.0].value.data();
        let t = self.nodes[target.0].value.data();
        let batch = self.nodes[pred.0].value.dims()[0] as f64;
        let norm = 1.0 / (2.0 * batch);
        let total: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * norm;
        let rg = self.needs(&[pred, target]);
        self.push(
            Tensor::scalar(total),
            Op::HalfSquaredError { pred, target, norm },
            rg,
            "half_mse",
        )
    }

    fn same_dims(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        let (da, db) = (self.nodes[a.0].value.dims(), self.nodes[b.0].value.dims());
        if da != db {
            return dim_err(format!("{op}: dims {da:?} and {db:?} differ"));
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Vec<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Precondition(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.nodes[loss.0].value.dims()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.node_backward(i, &dy)?;
            self.grads[i] = Some(dy);
            for (id, delta) in contributions {
                self.accumulate(id, delta);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, dy: &[f64]) -> Result<Vec<(NodeId, Vec<f64>)>> {
        let node = &self.nodes[i];
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.iter().map(|v| -v).collect()));
            }
            Op::Scale(a, f) => out.push((*a, dy.iter().map(|v| v * f).collect())),
            Op::Relu(a) => {
                let x = val(*a).data();
                out.push((
                    *a,
                    dy.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                ));
            }
            Op::Prelu { input, slope } => {
                let x = val(*input).data();
                let a = val(*slope).data()[0];
                if rg(*input) {
                    out.push((
                        *input,
                        dy.iter()
                            .zip(x)
                            .map(|(g, &x)| if x >= 0.0 { *g } else { a * g })
                            .collect(),
                    ));
                }
                if rg(*slope) {
                    let ds = dy.iter().zip(x).filter(|(_, &x)| x < 0.0).map(|(g, x)| g * x).sum();
                    out.push((*slope, vec![ds]));
                }
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.dims(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + k;
                        let dot: f64 = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                size,
                cols,
            } => {
                let xd = val(*input).dims();
                let (n, c_in, h, w) = (xd[0], xd[1], xd[2], xd[3]);
                let c_out = val(*kernel).dims()[0];
                let hw = h * w;
                let rows = c_in * size * size;
                let k = val(*kernel).data();
                let mut db = vec![0.0; c_out];
                let mut dk = vec![0.0; c_out * rows];
                let mut dx = vec![0.0; n * c_in * hw];
                let need_b = bias.is_some_and(&rg);
                for (start, count) in chunks(n, hw) {
                    let ld = count * hw;
                    let block = &cols[start * rows * hw..(start + count) * rows * hw];
                    // dY of the chunk as [c_out, ld], matching the column layout.
                    let mut wide = vec![0.0; c_out * ld];
                    for b in 0..count {
                        for co in 0..c_out {
                            let at = ((start + b) * c_out + co) * hw;
                            wide[co * ld + b * hw..co * ld + (b + 1) * hw].copy_from_slice(&dy[at..at + hw]);
                        }
                    }
                    if need_b {
                        for (d, r) in db.iter_mut().zip(wide.chunks(ld)) {
                            *d += r.iter().sum::<f64>();
                        }
                    }
                    if rg(*kernel) {
                        // dK[c_out, rows] += dY[c_out, ld] * cols^T[ld, rows]
                        gemm(c_out, ld, rows, &wide, (ld, 1), block, (1, ld), 1.0, &mut dk, (rows, 1));
                    }
                    if rg(*input) {
                        // dcols[rows, ld] = K^T[rows, c_out] * dY[c_out, ld]
                        let mut dcols = vec![0.0; rows * ld];
                        gemm(rows, c_out, ld, k, (1, rows), &wide, (ld, 1), 0.0, &mut dcols, (ld, 1));
                        for b in 0..count {
                            let at = (start + b) * c_in * hw;
                            col2im(&dcols, c_in, h, w, *size, &mut dx[at..at + c_in * hw], ld, b * hw);
                        }
                    }
                }
                if need_b {
                    out.push((bias.expect("checked"), db));
                }
                if rg(*kernel) {
                    out.push((*kernel, dk));
                }
                if rg(*input) {
                    out.push((*input, dx));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
                ..
            } => {
                let xd = val(*input).dims();
                let (n, c) = (xd[0], xd[1]);
                let inner: usize = xd[2..].iter().product();
                let count = (n * inner) as f64;
                let g = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for idx in base..base + inner {
                            dgamma[ch] += dy[idx] * xhat[idx];
                            dbeta[ch] += dy[idx];
                        }
                    }
                }
                if rg(*input) {
                    let mut dx = vec![0.0; dy.len()];
                    for ch in 0..c {
                        let scale = g[ch] * inv_std[ch];
                        for b in 0..n {
                            let base = (b * c + ch) * inner;
                            for idx in base..base + inner {
                                dx[idx] = match mode {
                                    BnMode::Eval => dy[idx] * scale,
                                    // dbeta/dgamma double as sum(dy) and sum(dy * xhat)
                                    BnMode::Train => scale * (dy[idx] - (dbeta[ch] + xhat[idx] * dgamma[ch]) / count),
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if rg(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if rg(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::AxialScores { query, key, scale } => {
                let qd = val(*query).dims();
                let (n, d, r, l) = (qd[0], qd[1], qd[2], qd[3]);
                let q = val(*query).data();
                let k = val(*key).data();
                let mut dq = vec![0.0; q.len()];
                let mut dk = vec![0.0; k.len()];
                for b in 0..n {
                    for row in 0..r {
                        let ds = &dy[(b * r + row) * l * l..(b * r + row + 1) * l * l];
                        for c in 0..d {
                            let base = ((b * d + c) * r + row) * l;
                            for i in 0..l {
                                let dsi = &ds[i * l..(i + 1) * l];
                                let mut acc = 0.0;
                                for j in 0..l {
                                    acc += dsi[j] * k[base + j];
                                    dk[base + j] += scale * dsi[j] * q[base + i];
                                }
                                dq[base + i] = scale * acc;
                            }
                        }
                    }
                }
                out.push((*query, dq));
                out.push((*key, dk));
            }
            Op::AxialApply { weights, value } => {
                let vd = val(*value).dims();
                let (n, d, r, l) = (vd[0], vd[1], vd[2], vd[3]);
                let s = val(*weights).data();
                let v = val(*value).data();
                let mut ds = vec![0.0; s.len()];
                let mut dv = vec![0.0; v.len()];
                for b in 0..n {
                    for row in 0..r {
                        let sbase = (b * r + row) * l * l;
                        for c in 0..d {
                            let base = ((b * d + c) * r + row) * l;
                            for i in 0..l {
                                let g = dy[base + i];
                                for j in 0..l {
                                    ds[sbase + i * l + j] += g * v[base + j];
                                    dv[base + j] += s[sbase + i * l + j] * g;
                                }
                            }
                        }
                    }
                }
                out.push((*weights, ds));
                out.push((*value, dv));
            }
            Op::Sum(a) => out.push((*a, vec![dy[0]; val(*a).numel()])),
            Op::WeightedSum { input, weights } => {
                out.push((*input, weights.iter().map(|w| w * dy[0]).collect()));
            }
            Op::HalfSquaredError { pred, target, norm } => {
                let p = val(*pred).data();
                let t = val(*target).data();
                let d: Vec<f64> = p.iter().zip(t).map(|(a, b)| 2.0 * norm * (a - b) * dy[0]).collect();
                if rg(*target) {
                    out.push((*target, d.iter().map(|v| -v).collect()));
                }
                out.push((*pred, d));
            }
        }
        for (id, delta) in &out {
            if let Some(bad) = delta.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("backward of {} (node {}, element {bad})", op_name(&node.op), id.0),
                });
            }
        }
        Ok(out)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Prelu { .. } => "prelu",
        Op::Softmax { .. } => "softmax",
        Op::Conv2d { .. } => "conv2d",
        Op::BatchNorm { .. } => "batchnorm",
        Op::AxialScores { .. } => "axial_scores",
        Op::AxialApply { .. } => "axial_apply",
        Op::Sum(_) => "sum",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::HalfSquaredError { .. } => "half_mse",
    }
}

fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Target number of GEMM columns per convolution chunk.
const CONV_CHUNK_COLUMNS: usize = 256;

/// `(start, count)` sample groups of roughly [`CONV_CHUNK_COLUMNS`] columns.
fn chunks(n: usize, hw: usize) -> impl Iterator<Item = (usize, usize)> {
    let per = (CONV_CHUNK_COLUMNS / hw.max(1)).max(1);
    (0..n).step_by(per).map(move |s| (s, per.min(n - s)))
}

/// Valid output range `[lo, hi)` along an axis of length `len` for a tap
/// offset `d`, i.e. positions whose source `pos + d` is inside the axis.
fn valid(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Writes the patches of one `[c_in, h, w]` sample into `cols[rows, ld]`
/// starting at column `offset`.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c_in: usize, h: usize, w: usize, s: usize, cols: &mut [f64], ld: usize, offset: usize) {
    let pad = (s / 2) as isize;
    let hw = h * w;
    for c in 0..c_in {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..s {
            let dy = ky as isize - pad;
            let (y0, y1) = valid(h, dy);
            for kx in 0..s {
                let dx = kx as isize - pad;
                let (x0, x1) = valid(w, dx);
                let row = (c * s + ky) * s + kx;
                let dst = &mut cols[row * ld + offset..row * ld + offset + hw];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols[rows, ld]` (from column
/// `offset`) back into one `[c_in, h, w]` sample.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c_in: usize, h: usize, w: usize, s: usize, dx: &mut [f64], ld: usize, offset: usize) {
    let pad = (s / 2) as isize;
    let hw = h * w;
    for c in 0..c_in {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..s {
            let dy = ky as isize - pad;
            let (y0, y1) = valid(h, dy);
            for kx in 0..s {
                let ddx = kx as isize - pad;
                let (x0, x1) = valid(w, ddx);
                let row = (c * s + ky) * s + kx;
                let src = &cols[row * ld + offset..row * ld + offset + hw];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + ddx) as usize;
                    let d = &mut plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (a, b) in d.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// `c[m, n] = a[m, k] * b[k, n] + beta * c`, strides given as (row, col).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, k, a_strides) < a.len());
    assert!(last(k, n, b_strides) < b.len());
    assert!(last(m, n, c_strides) < c.len());
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}
