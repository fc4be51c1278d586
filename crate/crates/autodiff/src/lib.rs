//! Reverse-mode automatic differentiation over dense row-major arrays.
//!
//! Operations are recorded on a [`Tape`] in execution order; [`Tape::backward`]
//! walks it in reverse and accumulates gradients for every trainable leaf.

pub mod adam;
pub mod checkpoint;
mod element;
mod error;
pub mod gradcheck;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, adam_step_store, AdamConfig, AdamState};
pub use element::{gemm, Element};
pub use error::{AutodiffError, Result};
pub use ops::conv::ConvSpec;
pub use ops::sample::{GatherPlan, SamplePoints};
pub use ops::OpKind;
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{numel, Tensor};
