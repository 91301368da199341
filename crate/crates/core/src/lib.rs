//! Zero-shot model inversion.
//!
//! Learns a feed-forward inverse of a trained convolutional network block by
//! block, guided by cycle consistency through the frozen target and trained
//! on images synthesized from the target's batch-norm statistics.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod dci;
pub mod error;
pub mod eval;
pub mod io;
pub mod network;
pub mod optim;
pub mod par;
pub mod synthesis;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;
