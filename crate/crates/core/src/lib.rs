//! Checkpoint merging with saliency-trimmed task vectors.
//!
//! The pipeline: read checkpoints ([`tensorstore`]), form task vectors
//! against a shared base ([`taskvec`]), collect per-layer input statistics
//! with a forward pass ([`calib`]), score coordinates ([`saliency`]), and
//! merge ([`merge`]). [`bench`] builds planted multi-task problems for
//! checking all of it end to end.

pub mod bench;
pub mod calib;
pub mod error;
pub mod merge;
pub mod rng;
pub mod saliency;
pub mod taskvec;
pub mod tensorstore;

pub use error::{Error, Result};
pub use tensorstore::{read_checkpoint, write_checkpoint, Tensor, TensorMap};
