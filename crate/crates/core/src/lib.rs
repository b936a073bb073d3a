//! Deep bilinear transformation (DBT) on a small, self-contained CPU stack.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a recorded compute graph with reverse-mode
//!   gradients, and a finite-difference checker.
//! - [`nn`]: convolution, batch norm, pooling, the softmax classifier loss and
//!   SGD with a cosine learning-rate schedule.
//! - [`dbt`]: semantic grouping loss, group index encoding, group bilinear
//!   aggregation, channel interpolation and the residual DBT block.
//! - [`zoo`]: reference bilinear variants used as oracles and baselines.
//! - [`arch`]: declarative architecture descriptors, the network builder and
//!   analytic parameter / FLOP counters.
//! - [`data`]: a deterministic synthetic part-texture dataset.
//! - [`train`]: training, evaluation, checkpoints and interaction analysis.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Kernels take flat buffers plus their dimensions.
#![allow(clippy::too_many_arguments)]

pub mod arch;
pub mod cli;
pub mod data;
pub mod dbt;
pub mod error;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{Element, Graph, NodeId, Tensor};
