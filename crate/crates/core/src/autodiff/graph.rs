//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every op appends a node whose inputs precede it, so reverse append order
//! is a valid topological order for the backward sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias { x: usize, b: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    ConvT2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    MaxPool { x: usize, argmax: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    GlobalAvgPool(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    L1(usize, usize),
    L2Dist(usize, usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    BceLogits { logits: usize, target: f64 },
    TotalVariation(usize),
    ChannelMean(usize),
    ChannelVar { x: usize, mean: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics computed by a train-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable belongs to another graph");
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.id {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Clears gradients so that [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(Error::Graph("variable belongs to a detached graph".into()));
        }
        Ok(v.idx)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{name} produced a non-finite value (node {})",
                self.nodes.len()
            )));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    // ---- operators -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.val(ai).dims2()?;
        let (k2, n) = self.val(bi).dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul inner dims {k} vs {k2}"));
        }
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.val(ai).data(), false, self.val(bi).data(), false, &mut c, 0.0);
        self.push("matmul", Tensor::from_parts(vec![m, n], c), Op::MatMul(ai, bi), &[ai, bi])
    }

    /// Adds a per-channel bias along axis 1.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.check(x)?, self.check(b)?);
        let (n, c, s) = kernels::channel_layout(self.val(xi))?;
        if self.val(bi).shape() != [c] {
            return Err(shape_err!("bias {:?} for {c} channels", self.val(bi).shape()));
        }
        let mut y = self.val(xi).data().to_vec();
        let bd = self.val(bi).data();
        for ni in 0..n {
            for ci in 0..c {
                for v in &mut y[(ni * c + ci) * s..][..s] {
                    *v += bd[ci];
                }
            }
        }
        let shape = self.val(xi).shape().to_vec();
        self.push("add_bias", Tensor::from_parts(shape, y), Op::AddBias { x: xi, b: bi }, &[xi, bi])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let bi = b.map(|b| self.check(b)).transpose()?;
        let y = kernels::conv2d_forward(self.val(xi), self.val(wi), bi.map(|i| self.val(i)), stride, pad)?;
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        self.push("conv2d", y, Op::Conv2d { x: xi, w: wi, b: bi, stride, pad }, &inputs)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let bi = b.map(|b| self.check(b)).transpose()?;
        let y = kernels::conv_transpose2d_forward(self.val(xi), self.val(wi), bi.map(|i| self.val(i)), stride, pad)?;
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        self.push("conv_transpose2d", y, Op::ConvT2d { x: xi, w: wi, b: bi, stride, pad }, &inputs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let y = self.val(xi).map(|v| v.max(0.0));
        self.push("relu", y, Op::Relu(xi), &[xi])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let y = self.val(xi).map(|v| if v > 0.0 { v } else { slope * v });
        self.push("leaky_relu", y, Op::LeakyRelu(xi, slope), &[xi])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let y = self.val(xi).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push("sigmoid", y, Op::Sigmoid(xi), &[xi])
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let (y, argmax) = kernels::maxpool2d_forward(self.val(xi), k, stride)?;
        self.push("maxpool2d", y, Op::MaxPool { x: xi, argmax }, &[xi])
    }

    /// Batch norm normalizing with the batch's own statistics. Returns the
    /// output and the (biased) batch statistics used.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (n, c, s) = kernels::channel_layout(self.val(xi))?;
        if n * s == 0 {
            return Err(config_err!("batch norm over an empty batch"));
        }
        self.check_affine(gi, bi, c)?;
        let (mean, var) = kernels::channel_stats(self.val(xi))?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::batchnorm_apply(self.val(xi), self.val(gi).data(), self.val(bi).data(), &inv_std, &mean);
        let op = Op::BatchNorm { x: xi, gamma: gi, beta: bi, xhat, inv_std, batch_stats: true };
        let out = self.push("batchnorm_train", y, op, &[xi, gi, bi])?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch norm normalizing with fixed (running) statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (_, c, _) = kernels::channel_layout(self.val(xi))?;
        self.check_affine(gi, bi, c)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err!("running statistics for {} channels, input has {c}", mean.len()));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::batchnorm_apply(self.val(xi), self.val(gi).data(), self.val(bi).data(), &inv_std, mean);
        let op = Op::BatchNorm { x: xi, gamma: gi, beta: bi, xhat, inv_std, batch_stats: false };
        self.push("batchnorm_eval", y, op, &[xi, gi, bi])
    }

    fn check_affine(&self, gi: usize, bi: usize, c: usize) -> Result<()> {
        if self.val(gi).shape() != [c] || self.val(bi).shape() != [c] {
            return Err(shape_err!(
                "batch norm affine params {:?}/{:?} for {c} channels",
                self.val(gi).shape(),
                self.val(bi).shape()
            ));
        }
        Ok(())
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (n, c, s) = kernels::channel_layout(self.val(xi))?;
        let xd = self.val(xi).data();
        let y: Vec<f64> = (0..n * c)
            .map(|p| xd[p * s..(p + 1) * s].iter().sum::<f64>() / s as f64)
            .collect();
        self.push("global_avg_pool", Tensor::from_parts(vec![n, c], y), Op::GlobalAvgPool(xi), &[xi])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let y = self.val(xi).clone().reshape(shape)?;
        self.push("reshape", y, Op::Reshape(xi), &[xi])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let y = self.val(ai).zip_map(self.val(bi), |p, q| p + q)?;
        self.push("add", y, Op::Add(ai, bi), &[ai, bi])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let y = self.val(ai).zip_map(self.val(bi), |p, q| p - q)?;
        self.push("sub", y, Op::Sub(ai, bi), &[ai, bi])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let y = self.val(xi).map(|v| c * v);
        self.push("scale", y, Op::Scale(xi, c), &[xi])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let y = Tensor::scalar(self.val(xi).sum());
        self.push("sum", y, Op::Sum(xi), &[xi])
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ai), self.val(bi));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("l1_loss {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(p, q)| (p - q).abs()).sum();
        let y = Tensor::scalar(s / ta.len() as f64);
        self.push("l1_loss", y, Op::L1(ai, bi), &[ai, bi])
    }

    /// Euclidean norm of `a − b`.
    pub fn l2_stat_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ai), self.val(bi));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("l2_stat_loss {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        self.push("l2_stat_loss", Tensor::scalar(s.sqrt()), Op::L2Dist(ai, bi), &[ai, bi])
    }

    /// Mean softmax cross-entropy of `N×K` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let (n, k) = self.val(li).dims2()?;
        if labels.len() != n {
            return Err(shape_err!("{} labels for a batch of {n}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err!("label {bad} out of range for {k} classes"));
        }
        let ld = self.val(li).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[labels[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let y = Tensor::scalar(loss / n as f64);
        self.push("cross_entropy", y, Op::CrossEntropy { logits: li, labels: labels.to_vec(), probs }, &[li])
    }

    /// Mean binary cross-entropy of raw logits against a constant target.
    pub fn bce_with_logits(&mut self, logits: Var, target: f64) -> Result<Var> {
        let li = self.check(logits)?;
        let t = self.val(li);
        // softplus(x) − t·x, computed stably
        let s: f64 = t
            .data()
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p() - target * x)
            .sum();
        let y = Tensor::scalar(s / t.len() as f64);
        self.push("bce_with_logits", y, Op::BceLogits { logits: li, target }, &[li])
    }

    /// Mean absolute horizontal difference plus mean absolute vertical
    /// difference over an `N×C×H×W` batch.
    pub fn total_variation(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (n, c, h, w) = self.val(xi).dims4()?;
        let xd = self.val(xi).data();
        let (mut sh, mut sv) = (0.0, 0.0);
        for p in 0..n * c {
            let img = &xd[p * h * w..(p + 1) * h * w];
            for r in 0..h {
                for q in 0..w {
                    if q + 1 < w {
                        sh += (img[r * w + q + 1] - img[r * w + q]).abs();
                    }
                    if r + 1 < h {
                        sv += (img[(r + 1) * w + q] - img[r * w + q]).abs();
                    }
                }
            }
        }
        let (nh, nv) = tv_counts(n * c, h, w);
        let y = nh.map_or(0.0, |c| sh / c) + nv.map_or(0.0, |c| sv / c);
        self.push("total_variation", Tensor::scalar(y), Op::TotalVariation(xi), &[xi])
    }

    /// Per-channel mean over all axes except axis 1.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (mean, _) = kernels::channel_stats(self.val(xi))?;
        let c = mean.len();
        self.push("channel_mean", Tensor::from_parts(vec![c], mean), Op::ChannelMean(xi), &[xi])
    }

    /// Per-channel biased variance over all axes except axis 1.
    pub fn channel_var(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (mean, var) = kernels::channel_stats(self.val(xi))?;
        let c = var.len();
        self.push("channel_var", Tensor::from_parts(vec![c], var), Op::ChannelVar { x: xi, mean }, &[xi])
    }

    // ---- backward --------------------------------------------------------

    /// Propagates `∂loss/∂·` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if self.val(li).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(li).shape()
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[li].requires_grad {
            return Ok(());
        }
        self.grads[li] = Some(Tensor::from_parts(self.val(li).shape().to_vec(), vec![1.0]));

        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            for (input, dg) in self.node_backward(i, &g)? {
                if self.nodes[input].requires_grad {
                    accumulate(&mut self.grads[input], dg);
                }
            }
        }
        Ok(())
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut res = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.val(a).dims2()?;
                let n = out.shape()[1];
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, self.val(b).data(), true, &mut da, 0.0);
                    res.push((a, Tensor::from_parts(vec![m, k], da)));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.val(a).data(), true, g.data(), false, &mut db, 0.0);
                    res.push((b, Tensor::from_parts(vec![k, n], db)));
                }
            }
            &Op::AddBias { x, b } => {
                let (n, c, s) = kernels::channel_layout(out)?;
                res.push((x, g.clone()));
                if self.needs(b) {
                    let mut db = vec![0.0; c];
                    for ni in 0..n {
                        for (ci, d) in db.iter_mut().enumerate() {
                            *d += g.data()[(ni * c + ci) * s..][..s].iter().sum::<f64>();
                        }
                    }
                    res.push((b, Tensor::from_parts(vec![c], db)));
                }
            }
            &Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.val(x), self.val(w), g, stride, pad, self.needs(x), self.needs(w))?;
                res.extend(dx.map(|d| (x, d)));
                res.extend(dw.map(|d| (w, d)));
                res.extend(b.map(|b| (b, db)));
            }
            &Op::ConvT2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv_transpose2d_backward(self.val(x), self.val(w), g, stride, pad, self.needs(x), self.needs(w))?;
                res.extend(dx.map(|d| (x, d)));
                res.extend(dw.map(|d| (w, d)));
                res.extend(b.map(|b| (b, db)));
            }
            &Op::Relu(x) => {
                let d = self.val(x).zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 })?;
                res.push((x, d));
            }
            &Op::LeakyRelu(x, c) => {
                let d = self.val(x).zip_map(g, |v, gv| if v > 0.0 { gv } else { c * gv })?;
                res.push((x, d));
            }
            &Op::Sigmoid(x) => {
                let d = out.zip_map(g, |s, gv| gv * s * (1.0 - s))?;
                res.push((x, d));
            }
            Op::MaxPool { x, argmax } => {
                let mut d = Tensor::zeros(self.val(*x).shape());
                for (gv, &src) in g.data().iter().zip(argmax) {
                    d.data_mut()[src] += gv;
                }
                res.push((*x, d));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, s) = kernels::channel_layout(out)?;
                let gd = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * s;
                        for j in off..off + s {
                            dgamma[ci] += gd[j] * xhat[j];
                            dbeta[ci] += gd[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let gam = self.val(*gamma).data();
                    let m = (n * s) as f64;
                    let mut dx = vec![0.0; gd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * s;
                            let scale = gam[ci] * inv_std[ci];
                            for j in off..off + s {
                                dx[j] = if *batch_stats {
                                    scale * (gd[j] - dbeta[ci] / m - xhat[j] * dgamma[ci] / m)
                                } else {
                                    scale * gd[j]
                                };
                            }
                        }
                    }
                    res.push((*x, Tensor::from_parts(out.shape().to_vec(), dx)));
                }
                res.push((*gamma, Tensor::from_parts(vec![c], dgamma)));
                res.push((*beta, Tensor::from_parts(vec![c], dbeta)));
            }
            &Op::GlobalAvgPool(x) => {
                let (n, c, s) = kernels::channel_layout(self.val(x))?;
                let mut d = vec![0.0; n * c * s];
                for p in 0..n * c {
                    let v = g.data()[p] / s as f64;
                    d[p * s..(p + 1) * s].iter_mut().for_each(|e| *e = v);
                }
                res.push((x, Tensor::from_parts(self.val(x).shape().to_vec(), d)));
            }
            &Op::Reshape(x) => {
                res.push((x, g.clone().reshape(self.val(x).shape())?));
            }
            &Op::Add(a, b) => {
                res.push((a, g.clone()));
                res.push((b, g.clone()));
            }
            &Op::Sub(a, b) => {
                res.push((a, g.clone()));
                res.push((b, g.map(|v| -v)));
            }
            &Op::Scale(x, c) => {
                res.push((x, g.map(|v| c * v)));
            }
            &Op::Sum(x) => {
                res.push((x, Tensor::full(self.val(x).shape(), g.item())));
            }
            &Op::L1(a, b) => {
                let scale = g.item() / self.val(a).len() as f64;
                let d = self.val(a).zip_map(self.val(b), |p, q| scale * sign(p - q))?;
                if self.needs(b) {
                    res.push((b, d.map(|v| -v)));
                }
                res.push((a, d));
            }
            &Op::L2Dist(a, b) => {
                let norm = out.item();
                let scale = if norm > 0.0 { g.item() / norm } else { 0.0 };
                let d = self.val(a).zip_map(self.val(b), |p, q| scale * (p - q))?;
                if self.needs(b) {
                    res.push((b, d.map(|v| -v)));
                }
                res.push((a, d));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (n, k) = self.val(*logits).dims2()?;
                let scale = g.item() / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= scale;
                }
                res.push((*logits, Tensor::from_parts(vec![n, k], d)));
            }
            &Op::BceLogits { logits, target } => {
                let t = self.val(logits);
                let scale = g.item() / t.len() as f64;
                let d = t.map(|x| scale * (1.0 / (1.0 + (-x).exp()) - target));
                res.push((logits, d));
            }
            &Op::TotalVariation(x) => {
                let (n, c, h, w) = self.val(x).dims4()?;
                let (nh, nv) = tv_counts(n * c, h, w);
                let (ch, cv) = (nh.map_or(0.0, |c| g.item() / c), nv.map_or(0.0, |c| g.item() / c));
                let xd = self.val(x).data();
                let mut d = vec![0.0; xd.len()];
                for p in 0..n * c {
                    let base = p * h * w;
                    for r in 0..h {
                        for q in 0..w {
                            let i = base + r * w + q;
                            if q + 1 < w {
                                let s = ch * sign(xd[i + 1] - xd[i]);
                                d[i + 1] += s;
                                d[i] -= s;
                            }
                            if r + 1 < h {
                                let s = cv * sign(xd[i + w] - xd[i]);
                                d[i + w] += s;
                                d[i] -= s;
                            }
                        }
                    }
                }
                res.push((x, Tensor::from_parts(vec![n, c, h, w], d)));
            }
            &Op::ChannelMean(x) => {
                let (n, c, s) = kernels::channel_layout(self.val(x))?;
                let m = (n * s) as f64;
                let mut d = vec![0.0; n * c * s];
                for ni in 0..n {
                    for ci in 0..c {
                        let v = g.data()[ci] / m;
                        d[(ni * c + ci) * s..][..s].iter_mut().for_each(|e| *e = v);
                    }
                }
                res.push((x, Tensor::from_parts(self.val(x).shape().to_vec(), d)));
            }
            Op::ChannelVar { x, mean } => {
                let xv = self.val(*x);
                let (n, c, s) = kernels::channel_layout(xv)?;
                let m = (n * s) as f64;
                let xd = xv.data();
                let mut d = vec![0.0; xd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let f = 2.0 * g.data()[ci] / m;
                        let off = (ni * c + ci) * s;
                        for j in off..off + s {
                            d[j] = f * (xd[j] - mean[ci]);
                        }
                    }
                }
                res.push((*x, Tensor::from_parts(xv.shape().to_vec(), d)));
            }
        }
        Ok(res)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Number of horizontal and vertical neighbour pairs, `None` when a
/// direction has none.
fn tv_counts(planes: usize, h: usize, w: usize) -> (Option<f64>, Option<f64>) {
    let nh = planes * h * (w - 1);
    let nv = planes * (h - 1) * w;
    ((nh > 0).then_some(nh as f64), (nv > 0).then_some(nv as f64))
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.axpy(1.0, &g),
        None => *slot = Some(g),
    }
}
