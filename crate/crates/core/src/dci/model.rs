use std::ops::Range;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::network::{
    apply_layers, check_input, init_params, mirror_spec, mirrored_block, Bound, BnMode, ForwardRecord, NetworkSpec,
    ParamStore,
};
use crate::tensor::Tensor;

/// Inversion modules for every block of a target, stored as one mirrored
/// network whose block `j` inverts target block `L − j`.
#[derive(Clone, Debug, PartialEq)]
pub struct InversionModel {
    pub target: NetworkSpec,
    pub spec: NetworkSpec,
    pub params: ParamStore,
    /// Deepest target block with a trained inverse; 0 when untrained.
    pub trained_up_to: usize,
}

impl InversionModel {
    pub fn new(target: &NetworkSpec, seed: u64) -> Result<Self> {
        let spec = mirror_spec(target)?;
        let params = init_params(&spec, seed)?;
        Ok(InversionModel {
            target: target.clone(),
            spec,
            params,
            trained_up_to: 0,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.target.num_blocks()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.num_blocks() {
            return Err(Error::Index(format!(
                "inversion module {k} outside 1..={}",
                self.num_blocks()
            )));
        }
        Ok(())
    }

    /// Layers of the module inverting target block `k` (1-based).
    pub fn module_layers(&self, k: usize) -> Result<Range<usize>> {
        self.check_k(k)?;
        Ok(self.spec.block_range(mirrored_block(self.num_blocks(), k)))
    }

    /// Parameter names of the modules `ks`.
    pub fn module_param_names(&self, ks: Range<usize>) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for k in ks {
            out.extend(self.params.names_in_layers(self.module_layers(k)?));
        }
        Ok(out)
    }

    /// Runs modules `from_k, from_k − 1, …, 1` on an embedding of target
    /// block `from_k`. `mode(k)` picks the normalization mode per module.
    /// Returns the output of every module, deepest first.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        emb: Var,
        from_k: usize,
        mode: &dyn Fn(usize) -> BnMode,
        rec: &mut ForwardRecord,
    ) -> Result<Vec<Var>> {
        self.check_k(from_k)?;
        let mut outs = Vec::with_capacity(from_k);
        let mut cur = emb;
        for k in (1..=from_k).rev() {
            cur = apply_layers(g, &self.spec, &self.params, bound, self.module_layers(k)?, cur, mode(k), rec)?;
            outs.push(cur);
        }
        Ok(outs)
    }

    /// Eval-mode reconstruction from an embedding of block `from_k`, without
    /// clamping.
    pub fn reconstruct(&self, emb: &Tensor, from_k: usize) -> Result<Tensor> {
        self.check_k(from_k)?;
        check_input(emb, &self.target.block_output_shape(from_k - 1)?)?;
        let mut g = Graph::new();
        let bound = Bound::constants(&mut g, &self.params);
        let ev = g.constant(emb.clone());
        let mut rec = ForwardRecord::default();
        let outs = self.forward_graph(&mut g, &bound, ev, from_k, &|_| BnMode::Eval, &mut rec)?;
        Ok(g.value(*outs.last().expect("from_k ≥ 1")).clone())
    }

    /// Single forward pass from an embedding of target block `from_k` back
    /// to the target's input space. Image outputs are clamped to `[0, 1]`.
    pub fn invert(&self, emb: &Tensor, from_k: usize) -> Result<Tensor> {
        if from_k > self.trained_up_to {
            return Err(Error::Index(format!(
                "depth {from_k} requested but the inverse is trained up to {}",
                self.trained_up_to
            )));
        }
        let out = self.reconstruct(emb, from_k)?;
        if self.target.input_shape.len() == 3 {
            Ok(out.clamp(0.0, 1.0))
        } else {
            Ok(out)
        }
    }

    pub(crate) fn check_target(&self, target: &NetworkSpec) -> Result<()> {
        if &self.target != target {
            return Err(shape_err!("inversion model was built for a different target"));
        }
        Ok(())
    }
}

/// Free-function form of [`InversionModel::invert`].
pub fn invert(inv: &InversionModel, emb: &Tensor, from_k: usize) -> Result<Tensor> {
    inv.invert(emb, from_k)
}
