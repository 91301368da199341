//! Layer and block specifications, parameters, forward execution and the
//! construction of mirrored inversion architectures.

mod forward;
mod mirror;
mod params;
mod spec;

pub use forward::{
    apply_layers, forward_blocks, forward_full, forward_logits, forward_sub, ActivationTrace, BnMode, Bound,
    ForwardRecord, BN_EPS, BN_MOMENTUM,
};
pub(crate) use forward::check_input;
pub use mirror::{mirror_spec, mirrored_block, INVERSION_SLOPE};
pub use params::{init_params, ParamStore, RunningStats};
pub use spec::{param_name, Activation, ExpansionRow, LayerOp, LayerSpec, NetworkSpec};
