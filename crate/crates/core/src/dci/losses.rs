use serde::{Deserialize, Serialize};

use super::model::InversionModel;
use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::network::{forward_blocks, forward_full, forward_sub, Bound, BnMode, ForwardRecord, NetworkSpec, ParamStore};
use crate::tensor::Tensor;

/// Loss terms of one step. `total = layer + img + alpha·cyc`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stage: usize,
    pub iteration: usize,
    pub layer: f64,
    pub img: f64,
    pub cyc: f64,
    pub alpha: f64,
    pub total: f64,
}

fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("l1 of {:?} and {:?}", a.shape(), b.shape()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum();
    Ok(s / a.len() as f64)
}

/// Mean absolute error between an input and its reconstruction.
pub fn loss_img(x: &Tensor, x_rec: &Tensor) -> Result<f64> {
    l1(x, x_rec)
}

/// Mean absolute error between the input of target block `k` and its
/// reconstruction by module `k` from that block's output. Eval mode.
pub fn loss_layer(target: &NetworkSpec, tparams: &ParamStore, inv: &InversionModel, x: &Tensor, k: usize) -> Result<f64> {
    let u = if k == 1 {
        x.clone()
    } else {
        forward_sub(target, tparams, x, 1, k - 1)?
    };
    let v = forward_sub(target, tparams, &u, k, k)?;
    let mut g = Graph::new();
    let bound = Bound::constants(&mut g, &inv.params);
    let vv = g.constant(v);
    let mut rec = ForwardRecord::default();
    let out = crate::network::apply_layers(
        &mut g,
        &inv.spec,
        &inv.params,
        &bound,
        inv.module_layers(k)?,
        vv,
        BnMode::Eval,
        &mut rec,
    )?;
    l1(&u, g.value(out))
}

/// Sum over every target block of the mean absolute difference between the
/// block outputs for `x` and for `x_rec`. Eval mode.
pub fn loss_cyc(target: &NetworkSpec, tparams: &ParamStore, x: &Tensor, x_rec: &Tensor) -> Result<f64> {
    let a = forward_full(target, tparams, x, BnMode::Eval)?;
    let b = forward_full(target, tparams, x_rec, BnMode::Eval)?;
    let mut s = 0.0;
    for l in 1..a.states.len() {
        s += l1(a.at(l), b.at(l))?;
    }
    Ok(s)
}

pub fn loss_total(layer: f64, img: f64, cyc: f64, alpha: f64, stage: usize, iteration: usize) -> LossBreakdown {
    LossBreakdown {
        stage,
        iteration,
        layer,
        img,
        cyc,
        alpha,
        total: layer + img + alpha * cyc,
    }
}

/// Graph form of the cycle term: target trace of `x_rec` against constant
/// target states of the original input.
pub(crate) fn cyc_graph(
    g: &mut Graph,
    target: &NetworkSpec,
    tparams: &ParamStore,
    tbound: &Bound,
    x_rec: Var,
    states: &[Tensor],
) -> Result<Var> {
    let mut rec = ForwardRecord::default();
    let outs = forward_blocks(g, target, tparams, tbound, x_rec, 0..target.num_blocks(), BnMode::Eval, &mut rec)?;
    let mut total: Option<Var> = None;
    for (l, out) in outs.into_iter().enumerate() {
        let want = g.constant(states[l + 1].clone());
        let d = g.l1_loss(out, want)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(total.expect("target has at least one block"))
}
