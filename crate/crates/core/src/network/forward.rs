use std::collections::BTreeMap;
use std::ops::Range;

use super::params::ParamStore;
use super::spec::{param_name, Activation, LayerOp, NetworkSpec};
use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics (and report them).
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Graph leaves for the tensors of a [`ParamStore`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds every tensor; names accepted by `trainable` receive gradients.
    pub fn new(g: &mut Graph, params: &ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable(name))))
            .collect();
        Bound { vars }
    }

    pub fn constants(g: &mut Graph, params: &ParamStore) -> Self {
        Self::new(g, params, |_| false)
    }

    pub fn all_trainable(g: &mut Graph, params: &ParamStore) -> Self {
        Self::new(g, params, |_| true)
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} not bound")))
    }

    /// Gradients of every trainable tensor after `g.backward`. Tensors that
    /// did not influence the loss get zeros.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, v)| g.requires_grad(**v))
            .map(|(name, v)| {
                let grad = g
                    .grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(*v).shape()));
                (name.clone(), grad)
            })
            .collect()
    }
}

/// Side outputs of a graph forward pass.
#[derive(Default)]
pub struct ForwardRecord {
    /// When set, the pre-normalization input of every batch-norm layer is
    /// recorded in `bn_inputs`.
    pub collect_bn_inputs: bool,
    pub bn_inputs: Vec<(usize, Var)>,
    /// Batch statistics of every train-mode batch-norm layer.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

impl ForwardRecord {
    pub fn collecting_bn_inputs() -> Self {
        ForwardRecord {
            collect_bn_inputs: true,
            ..Default::default()
        }
    }
}

/// Applies `layers` of `spec` to the batched input `x`.
#[allow(clippy::too_many_arguments)]
pub fn apply_layers(
    g: &mut Graph,
    spec: &NetworkSpec,
    params: &ParamStore,
    bound: &Bound,
    layers: Range<usize>,
    mut x: Var,
    mode: BnMode,
    rec: &mut ForwardRecord,
) -> Result<Var> {
    for i in layers {
        let layer = &spec.layers[i];
        let bias = if layer.has_bias() {
            Some(bound.get(&param_name(i, "bias"))?)
        } else {
            None
        };
        x = match layer.op {
            LayerOp::Conv { stride, pad, .. } => {
                let w = bound.get(&param_name(i, "weight"))?;
                g.conv2d(x, w, bias, stride, pad)?
            }
            LayerOp::ConvTranspose { stride, pad, .. } => {
                let w = bound.get(&param_name(i, "weight"))?;
                g.conv_transpose2d(x, w, bias, stride, pad)?
            }
            LayerOp::Dense { .. } => {
                let w = bound.get(&param_name(i, "weight"))?;
                let y = g.matmul(x, w)?;
                match bias {
                    Some(b) => g.add_bias(y, b)?,
                    None => y,
                }
            }
            LayerOp::MaxPool { kernel, stride } => g.maxpool2d(x, kernel, stride)?,
            LayerOp::GlobalAvgPool => g.global_avg_pool(x)?,
            LayerOp::Flatten => {
                let n = g.value(x).batch();
                let per = g.value(x).item_len();
                g.reshape(x, &[n, per])?
            }
            LayerOp::Reshape { ref shape } => {
                let mut full = vec![g.value(x).batch()];
                full.extend_from_slice(shape);
                g.reshape(x, &full)?
            }
        };
        if layer.batch_norm {
            if rec.collect_bn_inputs {
                rec.bn_inputs.push((i, x));
            }
            let gamma = bound.get(&param_name(i, "gamma"))?;
            let beta = bound.get(&param_name(i, "beta"))?;
            x = match mode {
                BnMode::Train => {
                    let (y, stats) = g.batchnorm_train(x, gamma, beta, BN_EPS)?;
                    rec.batch_stats.push((i, stats));
                    y
                }
                BnMode::Eval => {
                    let r = params.running(i)?;
                    g.batchnorm_eval(x, gamma, beta, r.mean.data(), r.var.data(), BN_EPS)?
                }
            };
        }
        x = match layer.activation {
            Activation::None => x,
            Activation::Relu => g.relu(x)?,
            Activation::LeakyRelu { slope } => g.leaky_relu(x, slope)?,
            Activation::Sigmoid => g.sigmoid(x)?,
        };
    }
    Ok(x)
}

/// Runs blocks `blocks` (0-based) and returns each block's output.
#[allow(clippy::too_many_arguments)]
pub fn forward_blocks(
    g: &mut Graph,
    spec: &NetworkSpec,
    params: &ParamStore,
    bound: &Bound,
    x: Var,
    blocks: Range<usize>,
    mode: BnMode,
    rec: &mut ForwardRecord,
) -> Result<Vec<Var>> {
    let mut outs = Vec::with_capacity(blocks.len());
    let mut cur = x;
    for b in blocks {
        cur = apply_layers(g, spec, params, bound, spec.block_range(b), cur, mode, rec)?;
        outs.push(cur);
    }
    Ok(outs)
}

/// Input `x` and the output of every block, `F_{1:l}(x)` for `l = 1..L`.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    pub states: Vec<Tensor>,
    /// Batch statistics when run in train mode; empty in eval mode.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

impl ActivationTrace {
    /// `F_{1:l}(x)`; `l = 0` is the input.
    pub fn at(&self, l: usize) -> &Tensor {
        &self.states[l]
    }

    pub fn last(&self) -> &Tensor {
        self.states.last().expect("trace holds the input")
    }
}

pub(crate) fn check_input(x: &Tensor, expected: &[usize]) -> Result<()> {
    if x.rank() < 1 || &x.shape()[1..] != expected {
        return Err(shape_err!(
            "input {:?} does not match per-sample shape {:?}",
            x.shape(),
            expected
        ));
    }
    Ok(())
}

/// Full trace of block outputs.
pub fn forward_full(spec: &NetworkSpec, params: &ParamStore, x: &Tensor, mode: BnMode) -> Result<ActivationTrace> {
    check_input(x, &spec.input_shape)?;
    let mut g = Graph::new();
    let bound = Bound::constants(&mut g, params);
    let xv = g.constant(x.clone());
    let mut rec = ForwardRecord::default();
    let outs = forward_blocks(&mut g, spec, params, &bound, xv, 0..spec.num_blocks(), mode, &mut rec)?;
    let mut states = vec![x.clone()];
    states.extend(outs.into_iter().map(|v| g.value(v).clone()));
    Ok(ActivationTrace {
        states,
        batch_stats: rec.batch_stats,
    })
}

/// `F_{first:last}(x)` in eval mode, with 1-based inclusive block indices.
pub fn forward_sub(spec: &NetworkSpec, params: &ParamStore, x: &Tensor, first: usize, last: usize) -> Result<Tensor> {
    let l = spec.num_blocks();
    if first < 1 || first > last || last > l {
        return Err(Error::Index(format!(
            "sub-network {first}..={last} outside 1..={l}"
        )));
    }
    check_input(x, &spec.block_input_shape(first - 1)?)?;
    let mut g = Graph::new();
    let bound = Bound::constants(&mut g, params);
    let xv = g.constant(x.clone());
    let mut rec = ForwardRecord::default();
    let outs = forward_blocks(&mut g, spec, params, &bound, xv, first - 1..last, BnMode::Eval, &mut rec)?;
    Ok(g.value(*outs.last().expect("non-empty range")).clone())
}

/// Trunk followed by the head, e.g. classifier logits.
pub fn forward_logits(spec: &NetworkSpec, params: &ParamStore, x: &Tensor, mode: BnMode) -> Result<Tensor> {
    check_input(x, &spec.input_shape)?;
    let mut g = Graph::new();
    let bound = Bound::constants(&mut g, params);
    let xv = g.constant(x.clone());
    let mut rec = ForwardRecord::default();
    let y = apply_layers(&mut g, spec, params, &bound, 0..spec.layers.len(), xv, mode, &mut rec)?;
    Ok(g.value(y).clone())
}
