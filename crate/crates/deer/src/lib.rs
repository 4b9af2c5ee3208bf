//! DEER: a two-stage machine-generated-text detector. Stage 1 trains a
//! disentangled mixture-of-experts classifier under domain supervision;
//! stage 2 trains a REINFORCE policy that routes unlabeled inputs to expert
//! pathways, fused at inference by a top-m logit ensemble.

pub mod checkpoint;
pub mod data;
pub mod dmoe;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod incremental;
pub mod inference;
pub mod nnprims;
pub mod policy;

pub use error::{DeerError, Result};
